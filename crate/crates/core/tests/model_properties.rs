use physmamba_core::model::{channel_attention, flatten_tokens, tdc_forward, unflatten_tokens};
use physmamba_core::{ModelConfig, NormMode, PhysMamba, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(channels: usize, blocks: usize, frames: usize, side: usize) -> ModelConfig {
    ModelConfig {
        channels,
        blocks,
        d_state: 4,
        ca_ratio: 2,
        head_width: 4,
        frames,
        height: side,
        width: side,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn network_follows_shape_algebra(
        channels in prop::sample::select(vec![8usize, 16]),
        blocks in 1usize..=3,
        t4 in 1usize..=4,
        hm in 1usize..=2,
        wm in 1usize..=2,
        batch in 1usize..=2,
        seed in any::<u64>(),
    ) {
        let mut cfg = small(channels, blocks, 4 * t4, 0);
        let div = cfg.spatial_divisor();
        let (t, h, w) = (4 * t4, div * hm, div * wm);
        cfg.height = h;
        cfg.width = w;
        let net = PhysMamba::new(cfg.clone()).unwrap();
        let mut store = net.init_params(seed).unwrap();
        let x = Tensor::randn([batch, 3, t, h, w], &mut ChaCha8Rng::seed_from_u64(seed));

        let tape = Tape::no_grad();
        let mut s = store.bind(&tape, NormMode::Train, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let (slow, fast) = net.stem_and_split(&mut s, &xv).unwrap();
        prop_assert_eq!(slow.shape(), &[batch, channels, t / 4, h / 4, w / 4][..]);
        prop_assert_eq!(fast.shape(), &[batch, channels / 2, t / 2, h / 4, w / 4][..]);
        let y = net.forward(&mut s, &xv).unwrap();
        prop_assert_eq!(y.shape(), &[batch, t][..]);
        prop_assert!(y.value().all_finite());
    }
}

#[test]
fn silent_mamba_branch_leaves_the_residual_path() {
    let cfg = small(8, 1, 4, 8);
    let net = PhysMamba::new(cfg).unwrap();
    let mut store = net.init_params(3).unwrap();
    let block = net.slow[0].clone();
    store
        .get_mut(&format!("{}.out_proj.weight", block.mamba.prefix))
        .unwrap()
        .data_mut()
        .fill(0.0);
    let f = Tensor::randn([1, 8, 4, 4, 4], &mut ChaCha8Rng::seed_from_u64(4));

    let tape = Tape::no_grad();
    let mut s = store.bind(&tape, NormMode::Eval, false).unwrap();
    let fv = tape.constant(f).unwrap();
    let out = block.forward(&mut s, &fv).unwrap();

    let p = &block.prefix;
    let x = tdc_forward(&tape, &fv, &s.p(&format!("{p}.tdc.weight")).unwrap(), block.theta).unwrap();
    let x = s.batch_norm(&format!("{p}.bn"), &x).unwrap();
    let x = tape.relu(&x).unwrap();
    let h = flatten_tokens(&tape, &x).unwrap();
    let h = s.layer_norm(&format!("{p}.norm_out"), &h).unwrap();
    let g = unflatten_tokens(&tape, &h, &[1, 8, 4, 4, 4]).unwrap();
    let expected = channel_attention(&s, &format!("{p}.ca"), &g).unwrap();
    assert_eq!(out.data(), expected.data());
}

#[test]
fn every_input_frame_reaches_the_output() {
    let cfg = small(8, 2, 16, 16);
    let net = PhysMamba::new(cfg).unwrap();
    let mut store = net.init_params(5).unwrap();
    let x = Tensor::randn([1, 3, 16, 16, 16], &mut ChaCha8Rng::seed_from_u64(6));
    let base = net.predict(&mut store, &x, NormMode::Eval).unwrap();
    let frame = 16 * 16;
    for t in 0..16 {
        let mut bumped = x.clone();
        for c in 0..3 {
            let start = (c * 16 + t) * frame;
            for v in &mut bumped.data_mut()[start..start + frame] {
                *v += 1.0;
            }
        }
        let y = net.predict(&mut store, &bumped, NormMode::Eval).unwrap();
        assert!(y.max_abs_diff(&base) > 0.0, "frame {t} has no effect");
    }
}

#[test]
fn doubling_the_input_changes_the_output() {
    let cfg = small(8, 2, 8, 16);
    let net = PhysMamba::new(cfg).unwrap();
    let mut store = net.init_params(7).unwrap();
    let x = Tensor::randn([2, 3, 8, 16, 16], &mut ChaCha8Rng::seed_from_u64(8));
    let y1 = net.predict(&mut store, &x, NormMode::Train).unwrap();
    let y2 = net.predict(&mut store, &x.map(|v| 2.0 * v), NormMode::Train).unwrap();
    assert!(y1.max_abs_diff(&y2) > 1e-9);
}

#[test]
fn lateral_connection_shapes_and_impulse_support() {
    let net = PhysMamba::new(ModelConfig::default()).unwrap();
    let mut store = net.init_params(9).unwrap();
    let tape = Tape::no_grad();
    let s = store.bind(&tape, NormMode::Eval, false).unwrap();

    let fast = tape.constant(Tensor::randn([1, 32, 64, 8, 8], &mut ChaCha8Rng::seed_from_u64(10))).unwrap();
    assert_eq!(net.lateral(&s, 0, &fast).unwrap().shape(), &[1, 64, 32, 8, 8]);

    let (t0, h0, w0) = (9, 2, 5);
    let mut impulse = Tensor::zeros([1, 32, 16, 4, 6]);
    impulse.data_mut()[((3 * 16 + t0) * 4 + h0) * 6 + w0] = 1.0;
    let y = net.lateral(&s, 0, &tape.constant(impulse).unwrap()).unwrap();
    assert_eq!(y.shape(), &[1, 64, 8, 4, 6]);
    let support: Vec<(usize, usize, usize)> = (0..8)
        .flat_map(|t| (0..4).flat_map(move |h| (0..6).map(move |w| (t, h, w))))
        .filter(|&(t, h, w)| (0..64).any(|c| y.value().at(&[0, c, t, h, w]) != 0.0))
        .collect();
    // output step t reads input steps 2t-1, 2t, 2t+1
    let expected: Vec<(usize, usize, usize)> =
        (0..8).filter(|&t| (2 * t as i64 - t0 as i64).abs() <= 1).map(|t| (t, h0, w0)).collect();
    assert_eq!(support, expected);
}
