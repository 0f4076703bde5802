use efqat_core::cost::{network_report, ops_conv_bwd, ops_linear_bwd, ratio_report, reconcile};
use efqat_core::net::{forward, ForwardOptions, LayerSpec, Model, NetSpec, Phase};
use efqat_core::{RowMask, Tape, Tensor};
use proptest::prelude::*;

fn small_cnn(c1: usize, c2: usize, classes: usize) -> NetSpec {
    NetSpec {
        input: vec![2, 6, 6],
        layers: vec![
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: c1,
                kernel: 3,
                stride: 1,
                padding: 1,
                quantize: true,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                in_channels: c1,
                out_channels: c2,
                kernel: 3,
                stride: 2,
                padding: 0,
                quantize: true,
            },
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: c2 * 4,
                out_features: classes,
                quantize: true,
            },
        ],
        bits_w: 4,
        bits_a: 8,
    }
}

fn masks_for(spec: &NetSpec, bits: &[Vec<bool>]) -> Vec<RowMask> {
    spec.quantized_layers()
        .into_iter()
        .zip(bits)
        .map(|(layer, b)| RowMask::new(layer, b.clone()))
        .collect()
}

/// Runs one training-phase backward and returns the weight gradients and
/// live counters.
fn backward(model: &Model, batch: usize, masks: Option<&[RowMask]>) -> (Vec<Tensor>, efqat_core::MacCounter) {
    let shape: Vec<usize> = std::iter::once(batch)
        .chain(model.spec.input.iter().copied())
        .collect();
    let n: usize = shape.iter().product();
    let x = Tensor::new(
        shape,
        (0..n).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % model.spec.classes().unwrap()).collect();
    let mut tape = Tape::new();
    let vars = forward(
        &mut tape,
        model,
        x,
        ForwardOptions {
            phase: Phase::Train,
            trainable: true,
            quant: None,
            masks,
        },
    )
    .unwrap();
    let loss = tape.cross_entropy(vars.logits(), &labels).unwrap();
    let fwd = tape.macs().clone();
    let mut grads = tape.backward(loss).unwrap();
    let mut macs = grads.macs().clone();
    for (id, f) in fwd.layers() {
        macs.entry(Some(id)).forward -= f.forward;
    }
    let ws = vars.weights.values().map(|&v| grads.take(v).unwrap()).collect();
    (ws, macs)
}

fn mask_bits(c1: usize, c2: usize, classes: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
    (
        prop::collection::vec(any::<bool>(), c1),
        prop::collection::vec(any::<bool>(), c2),
        prop::collection::vec(any::<bool>(), classes),
    )
        .prop_map(|(a, b, c)| vec![a, b, c])
}

fn net_and_masks() -> impl Strategy<Value = (usize, usize, usize, Vec<Vec<bool>>, usize)> {
    (1usize..6, 1usize..6, 2usize..5, 1usize..4)
        .prop_flat_map(|(c1, c2, k, b)| (Just(c1), Just(c2), Just(k), mask_bits(c1, c2, k), Just(b)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn live_counters_match_the_closed_form((c1, c2, k, bits, batch) in net_and_masks(), seed in 0u64..1000) {
        let spec = small_cnn(c1, c2, k);
        let model = Model::init(spec.clone(), seed).unwrap();
        let masks = masks_for(&spec, &bits);
        let (_, macs) = backward(&model, batch, Some(&masks));
        let report = network_report(&spec, None, 0.0, &masks, batch).unwrap();
        prop_assert!(reconcile(&report, &macs).is_ok());
        prop_assert_eq!(report.total, macs.total().backward());
    }

    #[test]
    fn full_masks_equal_the_dense_path((c1, c2, k, _bits, batch) in net_and_masks(), seed in 0u64..1000) {
        let spec = small_cnn(c1, c2, k);
        let model = Model::init(spec.clone(), seed).unwrap();
        let all: Vec<Vec<bool>> = [c1, c2, k].iter().map(|&n| vec![true; n]).collect();
        let masks = masks_for(&spec, &all);
        let (dense, dense_macs) = backward(&model, batch, None);
        let (masked, masked_macs) = backward(&model, batch, Some(&masks));
        prop_assert!(dense.iter().zip(&masked).all(|(a, b)| a.bit_eq(b)));
        prop_assert_eq!(dense_macs, masked_macs);
    }

    #[test]
    fn frozen_rows_get_zero_gradients((c1, c2, k, bits, batch) in net_and_masks(), seed in 0u64..1000) {
        let spec = small_cnn(c1, c2, k);
        let model = Model::init(spec.clone(), seed).unwrap();
        let masks = masks_for(&spec, &bits);
        let (dense, _) = backward(&model, batch, None);
        let (masked, _) = backward(&model, batch, Some(&masks));
        for ((d, m), mask) in dense.iter().zip(&masked).zip(&masks) {
            let row = d.row_len();
            for c in 0..mask.len() {
                let (dr, mr) = (&d.data()[c * row..(c + 1) * row], &m.data()[c * row..(c + 1) * row]);
                if mask.is_unfrozen(c) {
                    prop_assert_eq!(dr, mr);
                } else {
                    prop_assert!(mr.iter().all(|v| v.to_bits() == 0));
                }
            }
        }
    }

    #[test]
    fn speedup_is_between_one_and_two(r in 0.0f64..=1.0, c1 in 1usize..8, c2 in 1usize..8) {
        let report = ratio_report(&small_cnn(c1, c2, 3), r, 4).unwrap();
        prop_assert!(report.speedup >= 1.0 && report.speedup <= 2.0);
    }

    #[test]
    fn weight_term_is_monotone_in_ratio(a in 0.0f64..=1.0, b in 0.0f64..=1.0, cin in 1u64..64, cout in 1u64..64, m in 1u64..32) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(ops_linear_bwd(cin, cout, m, lo).0 <= ops_linear_bwd(cin, cout, m, hi).0);
        prop_assert!(ops_conv_bwd(cin, cout, 3, 4, 4, m, lo).0 <= ops_conv_bwd(cin, cout, 3, 4, 4, m, hi).0);
    }
}

#[test]
fn zero_ratio_halves_matmul_cost() {
    let report = ratio_report(&NetSpec::reference_cnn(10), 0.0, 64).unwrap();
    assert_eq!(report.speedup, 2.0);
    assert_eq!(report.total * 2, report.dense_total);
}
