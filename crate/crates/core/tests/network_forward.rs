//! End-to-end forward checks: realized shapes, toggle soundness, state
//! persistence, and determinism.

use sodawidenet::config::NetworkConfig;
use sodawidenet::network::{assemble_network, shape_trace, NetworkState};
use sodawidenet::rng;
use sodawidenet::shape::Shape;
use sodawidenet::tensor::Tensor;

fn toy_batch(n: usize, resolution: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(Shape::new(n, 3, resolution, resolution), |_, _, _, _| {
        rng::normal(&mut r) as f32 * 0.5
    })
}

#[test]
fn forward_produces_full_resolution_logit_maps() {
    let config = NetworkConfig::toy(8, 96);
    let mut state: NetworkState<f32> = assemble_network(&config, 1).unwrap();
    let batch = toy_batch(2, 96, 2);
    let (sal, con) = state.forward(&batch, false).unwrap();
    assert_eq!(sal.shape(), Shape::new(2, 1, 96, 96));
    assert_eq!(con.unwrap().shape(), Shape::new(2, 1, 96, 96));
    assert!(sal.all_finite());
}

#[test]
fn contour_head_toggle_removes_second_output() {
    let mut config = NetworkConfig::toy(8, 32);
    config.enable_contour_head = false;
    let mut state: NetworkState<f32> = assemble_network(&config, 3).unwrap();
    let (_, con) = state.forward(&toy_batch(1, 32, 4), false).unwrap();
    assert!(con.is_none());
    assert!(!state.params.contains_key("head_con.weight"));
}

#[test]
fn resolution_mismatch_is_rejected() {
    let config = NetworkConfig::toy(8, 96);
    let mut state: NetworkState<f32> = assemble_network(&config, 1).unwrap();
    let err = state.forward(&toy_batch(1, 32, 0), false).unwrap_err();
    assert!(err.to_string().contains("resolution"), "{err}");
}

#[test]
fn all_toggle_combinations_with_an_encoder_branch_run() {
    let mut totals = Vec::new();
    for bits in 0..16u32 {
        let mut config = NetworkConfig::toy(8, 32);
        config.enable_msa = bits & 1 != 0;
        config.enable_mrffam = bits & 2 != 0;
        config.enable_mrffam_decoder = bits & 4 != 0;
        config.enable_lpm = bits & 8 != 0;
        let any_encoder = config.enable_msa || config.enable_mrffam || config.enable_lpm;
        let assembled = assemble_network::<f32>(&config, 7);
        if !any_encoder {
            assert!(assembled.is_err(), "bits {bits} should be rejected");
            continue;
        }
        let mut state = assembled.unwrap();
        let (sal, con) = state.forward(&toy_batch(1, 32, 9), true).unwrap();
        assert_eq!(sal.shape(), Shape::new(1, 1, 32, 32));
        assert!(con.is_some());
        assert!(sal.all_finite());
        let (_, total) = state.count_parameters();
        totals.push((bits, total));
    }
    assert_eq!(totals.len(), 14);

    // Enabling any single toggle strictly increases the parameter count.
    let total_of = |bits: u32| totals.iter().find(|(b, _)| *b == bits).map(|(_, t)| *t);
    for bits in 0..16u32 {
        for toggle in [1u32, 2, 4, 8] {
            if bits & toggle != 0 {
                continue;
            }
            if let (Some(without), Some(with)) = (total_of(bits), total_of(bits | toggle)) {
                assert!(
                    with > without,
                    "toggle {toggle:#x} on {bits:#x}: {with} <= {without}"
                );
            }
        }
    }
}

#[test]
fn save_load_round_trip_preserves_forward_bits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.swck");
    let config = NetworkConfig::toy(8, 32);
    let mut state: NetworkState<f32> = assemble_network(&config, 11).unwrap();
    // A training step's worth of buffer movement first, so running stats are
    // nontrivial.
    let batch = toy_batch(1, 32, 12);
    let _ = state.forward(&batch, true).unwrap();

    state.save(&path).unwrap();
    let mut reloaded = NetworkState::<f32>::load(&path).unwrap();
    assert_eq!(reloaded.config, state.config);
    assert_eq!(reloaded.params, state.params);
    assert_eq!(reloaded.buffers, state.buffers);

    let (a, _) = state.forward(&batch, false).unwrap();
    let (b, _) = reloaded.forward(&batch, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupted_checkpoint_fails_crc() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.swck");
    let state: NetworkState<f32> = assemble_network(&NetworkConfig::toy(8, 32), 5).unwrap();
    state.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let err = NetworkState::<f32>::load(&path).unwrap_err();
    assert!(err.to_string().contains("CRC"), "{err}");
}

#[test]
fn repeated_forwards_in_eval_mode_are_bit_identical() {
    let config = NetworkConfig::toy(8, 32);
    let mut state: NetworkState<f32> = assemble_network(&config, 21).unwrap();
    let batch = toy_batch(2, 32, 22);
    let (a, ca) = state.forward(&batch, false).unwrap();
    let (b, cb) = state.forward(&batch, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn multi_head_attention_config_forwards() {
    let mut config = NetworkConfig::toy(8, 32);
    config.attention_heads = 2;
    let mut state: NetworkState<f32> = assemble_network(&config, 13).unwrap();
    let (sal, _) = state.forward(&toy_batch(1, 32, 14), false).unwrap();
    assert_eq!(sal.shape(), Shape::new(1, 1, 32, 32));
    assert!(sal.all_finite());
}

#[test]
fn trace_supports_the_larger_evaluation_resolution() {
    // 416 is the evaluation size: 416/16 = 26 is the pyramid floor and all
    // block shapes scale accordingly.
    let mut config = NetworkConfig::full();
    config.input_resolution = 416;
    config.validate().unwrap();
    assert_eq!(config.msa_lowest(), 26);
    let trace = shape_trace(&config).unwrap();
    assert_eq!(trace.rows[0].input, (208, 208, 64));
    assert_eq!(trace.rows[0].output, (104, 104, 128));
    assert_eq!(trace.rows[3].input, (104, 104, 64));
}

#[test]
fn trace_rows_match_a_real_forward_at_toy_scale() {
    // The symbolic trace and an actual forward must agree on every realized
    // block shape; checked at 32 px where a full forward is cheap.
    let config = NetworkConfig::toy(8, 32);
    let trace = shape_trace(&config).unwrap();
    let mut state: NetworkState<f32> = assemble_network(&config, 31).unwrap();
    let (sal, _) = state.forward(&toy_batch(1, 32, 32), false).unwrap();
    assert_eq!(sal.shape(), Shape::new(1, 1, 32, 32));
    // HB1 row: input at R/2 with stem channels, output at R/4 doubled.
    assert_eq!(trace.rows[0].input, (16, 16, 8));
    assert_eq!(trace.rows[0].output, (8, 8, 16));
    assert_eq!(trace.rows[3].output, (8, 8, 8));
}
