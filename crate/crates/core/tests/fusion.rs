//! Local cross-attention against an independent dense masked-softmax oracle,
//! plus finite-difference checks through blocks and full stacks.

use lxfuse::fusion::{local_xattn, stack_forward, FusionConfig, FusionStack, LocalXAttnBlock, TokenGrid};
use lxfuse::gradcheck::{check_params, FD_STEP};
use lxfuse::grid::{NeighborhoodTable, PatchGrid};
use lxfuse::{Parameterized, Rng, Tensor};
use proptest::prelude::*;

fn rand_tokens(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    Tensor::from_fn(n, d, |_, _| rng.uniform_range(-1.0, 1.0))
}

/// Dense cross-attention written from scratch: full score matrix, -inf outside
/// the Euclidean radius, row softmax, value mix, output projection, residual.
fn masked_dense_oracle(z_q: &Tensor, z_kv: &Tensor, grid: PatchGrid, radius: f64, block: &LocalXAttnBlock) -> Tensor {
    let n = z_q.rows();
    let d = z_q.cols();
    let wq = &block.w_q.weight.value;
    let wk = &block.w_k.weight.value;
    let wv = &block.w_v.weight.value;
    let wo = &block.w_o.weight.value;
    let (dk, dv) = (wq.cols(), wv.cols());
    let proj = |x: &Tensor, w: &Tensor, i: usize, c: usize| (0..d).map(|p| x.at(i, p) * w.at(p, c)).sum::<f64>();
    let q: Vec<Vec<f64>> = (0..n).map(|i| (0..dk).map(|c| proj(z_q, wq, i, c)).collect()).collect();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..dk).map(|c| proj(z_kv, wk, i, c)).collect())
        .collect();
    let v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..dv).map(|c| proj(z_kv, wv, i, c)).collect())
        .collect();
    let mut out = z_q.clone();
    for u in 0..n {
        let (ur, uc) = ((u / grid.cols) as f64, (u % grid.cols) as f64);
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                let (jr, jc) = ((j / grid.cols) as f64, (j % grid.cols) as f64);
                if ((ur - jr).powi(2) + (uc - jc).powi(2)).sqrt() <= radius {
                    q[u].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let o: Vec<f64> = (0..dv).map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect();
        for c in 0..d {
            out.row_mut(u)[c] += (0..dv).map(|p| o[p] * wo.at(p, c)).sum::<f64>();
        }
    }
    out
}

#[test]
fn zero_values_leave_queries_unchanged() {
    let mut rng = Rng::new(1);
    let grid = PatchGrid::new(4, 4).unwrap();
    let block = LocalXAttnBlock::random(&mut rng, 8, 8, 8, 32, 2.0);
    let zq = TokenGrid::new(grid, rand_tokens(&mut rng, 16, 8)).unwrap();
    let zkv = TokenGrid::new(grid, Tensor::zeros(&[16, 8])).unwrap();
    let table = NeighborhoodTable::build(grid, grid, 2.0).unwrap();
    let out = local_xattn(&zq, &zkv, &table, &block).unwrap();
    assert_eq!(out, zq.tokens);
}

#[test]
fn matches_masked_dense_oracle_on_all_small_grids() {
    let mut rng = Rng::new(2);
    for side in 1..=8usize {
        let grid = PatchGrid::new(side, side).unwrap();
        for d in [4usize, 16] {
            for r in [1.0, 2.0, 3.0, grid.diameter()] {
                let block = LocalXAttnBlock::random(&mut rng, d, d, d, 4 * d, r);
                let zq = TokenGrid::new(grid, rand_tokens(&mut rng, grid.len(), d)).unwrap();
                let zkv = TokenGrid::new(grid, rand_tokens(&mut rng, grid.len(), d)).unwrap();
                let table = NeighborhoodTable::build(grid, grid, r).unwrap();
                let got = local_xattn(&zq, &zkv, &table, &block).unwrap();
                let want = masked_dense_oracle(&zq.tokens, &zkv.tokens, grid, r, &block);
                let err = got.max_abs_diff(&want);
                assert!(err < 1e-10, "side {side} d {d} r {r}: {err}");
            }
        }
    }
}

#[test]
fn radius_saturation_is_bit_identical() {
    let mut rng = Rng::new(3);
    let grid = PatchGrid::new(6, 6).unwrap();
    let diam = grid.diameter();
    let mut block = LocalXAttnBlock::random(&mut rng, 8, 8, 8, 32, diam);
    let zq = TokenGrid::new(grid, rand_tokens(&mut rng, 36, 8)).unwrap();
    let zkv = TokenGrid::new(grid, rand_tokens(&mut rng, 36, 8)).unwrap();
    let a = local_xattn(&zq, &zkv, &NeighborhoodTable::build(grid, grid, diam).unwrap(), &block).unwrap();
    block.radius = 10.0 * diam;
    let b = local_xattn(
        &zq,
        &zkv,
        &NeighborhoodTable::build(grid, grid, 10.0 * diam).unwrap(),
        &block,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn table_mismatch_rejected() {
    let mut rng = Rng::new(4);
    let grid = PatchGrid::new(4, 4).unwrap();
    let other = PatchGrid::new(2, 8).unwrap();
    let block = LocalXAttnBlock::random(&mut rng, 4, 4, 4, 16, 1.0);
    let zq = TokenGrid::new(grid, rand_tokens(&mut rng, 16, 4)).unwrap();
    let table = NeighborhoodTable::build(other, other, 1.0).unwrap();
    assert!(local_xattn(&zq, &zq, &table, &block).is_err());
    let table = NeighborhoodTable::build(grid, grid, 2.0).unwrap();
    assert!(local_xattn(&zq, &zq, &table, &block).is_err(), "radius mismatch");
}

#[test]
fn empty_stack_and_identity_stack_pass_rgb_through() {
    let mut rng = Rng::new(5);
    let grid = PatchGrid::new(4, 4).unwrap();
    let rgb = TokenGrid::new(grid, rand_tokens(&mut rng, 16, 8)).unwrap();
    let ir = TokenGrid::new(grid, rand_tokens(&mut rng, 16, 8)).unwrap();

    let mut cfg = FusionConfig::with_width(8);
    cfg.radii.clear();
    let empty = FusionStack::new(&cfg, &mut rng).unwrap();
    assert_eq!(stack_forward(&rgb, &ir, &empty, &[]).unwrap(), rgb.tokens);

    let stack = FusionStack::new(&FusionConfig::with_width(8), &mut rng).unwrap();
    let tables = stack.tables(grid, grid).unwrap();
    assert_eq!(stack_forward(&rgb, &ir, &stack, &tables).unwrap(), rgb.tokens);
    assert!(stack_forward(&rgb, &ir, &stack, &tables[..2]).is_err());
}

#[test]
fn non_decreasing_radii_enforced() {
    let mut cfg = FusionConfig::with_width(4);
    cfg.radii = vec![2.0, 1.0];
    assert!(FusionStack::new(&cfg, &mut Rng::new(0)).is_err());
}

/// Weighted-sum objective so every output entry carries gradient.
fn probe_loss(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn randomize_norms(stack: &mut FusionStack, rng: &mut Rng) {
    stack.visit_params_mut("", &mut |name, p| {
        if name.contains("ln_") || name.ends_with("bias") {
            for v in p.value.data_mut() {
                *v += rng.uniform_range(-0.3, 0.3);
            }
        }
    });
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut rng = Rng::new(6);
    let grid = PatchGrid::new(4, 4).unwrap();
    let mut cfg = FusionConfig::with_width(8);
    cfg.radii = vec![1.5];
    cfg.identity_init = false;
    let mut stack = FusionStack::new(&cfg, &mut rng).unwrap();
    randomize_norms(&mut stack, &mut rng);
    let tables = stack.tables(grid, grid).unwrap();
    let rgb = rand_tokens(&mut rng, 16, 8);
    let ir = rand_tokens(&mut rng, 16, 8);
    let w = rand_tokens(&mut rng, 16, 8);
    let (out, _) = stack.forward(&rgb, &ir, &tables).unwrap();
    assert_eq!(out.shape(), &[16, 8]);

    let report = check_params(
        &mut stack,
        FD_STEP,
        |s| probe_loss(&s.forward(&rgb, &ir, &tables).unwrap().0, &w),
        |s| {
            let (_, cache) = s.forward(&rgb, &ir, &tables).unwrap();
            s.backward(&cache, &w).unwrap();
        },
    );
    for r in &report {
        assert!(r.passes(1e-4), "{} rel err {}", r.name, r.max_rel_err);
    }
    assert_eq!(report.len(), stack.param_names().len());
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut rng = Rng::new(7);
    let grid = PatchGrid::new(3, 3).unwrap();
    let mut cfg = FusionConfig::with_width(4);
    cfg.identity_init = false;
    let mut stack = FusionStack::new(&cfg, &mut rng).unwrap();
    let tables = stack.tables(grid, grid).unwrap();
    let rgb = rand_tokens(&mut rng, 9, 4);
    let ir = rand_tokens(&mut rng, 9, 4);
    let w = rand_tokens(&mut rng, 9, 4);
    let (_, cache) = stack.forward(&rgb, &ir, &tables).unwrap();
    let (d_rgb, d_ir) = stack.backward(&cache, &w).unwrap();
    let f = |r: &Tensor, i: &Tensor| probe_loss(&stack.forward(r, i, &tables).unwrap().0, &w);
    let n_rgb = lxfuse::gradcheck::central_difference(rgb.data(), FD_STEP, |x| {
        f(&Tensor::from_vec(&[9, 4], x.to_vec()).unwrap(), &ir)
    });
    let n_ir = lxfuse::gradcheck::central_difference(ir.data(), FD_STEP, |x| {
        f(&rgb, &Tensor::from_vec(&[9, 4], x.to_vec()).unwrap())
    });
    assert!(lxfuse::gradcheck::rel_error(d_rgb.data(), &n_rgb) < 1e-6);
    assert!(lxfuse::gradcheck::rel_error(d_ir.data(), &n_ir) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outside_neighborhood_permutation_is_invisible(seed in 0u64..1000, side in 3usize..7, r in 0.0f64..3.5, u_pick in 0usize..1000) {
        let mut rng = Rng::new(seed);
        let grid = PatchGrid::new(side, side).unwrap();
        let n = grid.len();
        let block = LocalXAttnBlock::random(&mut rng, 6, 6, 6, 24, r);
        let table = NeighborhoodTable::build(grid, grid, r).unwrap();
        let zq = TokenGrid::new(grid, rand_tokens(&mut rng, n, 6)).unwrap();
        let zkv = rand_tokens(&mut rng, n, 6);
        let u = u_pick % n;
        let inside = table.neighbors(u);
        let mut outside: Vec<usize> = (0..n).filter(|v| !inside.contains(v)).collect();
        let mut perm = outside.clone();
        rng.shuffle(&mut perm);
        let mut shuffled = zkv.clone();
        for (src, dst) in outside.drain(..).zip(perm) {
            shuffled.row_mut(dst).copy_from_slice(zkv.row(src));
        }
        let a = local_xattn(&zq, &TokenGrid::new(grid, zkv).unwrap(), &table, &block).unwrap();
        let b = local_xattn(&zq, &TokenGrid::new(grid, shuffled).unwrap(), &table, &block).unwrap();
        prop_assert_eq!(a.row(u), b.row(u));
    }
}
