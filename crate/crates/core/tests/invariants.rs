//! Property-based invariants: round trips and exact inverses under
//! randomized inputs.

use proptest::prelude::*;

use fatc::bitstream::Bitstream;
use fatc::coder::gaussian::GaussianCoder;
use fatc::coder::range::{unzigzag, zigzag, RangeDecoder, RangeEncoder, PROB_SCALE};
use fatc::fdwa::{window_merge, window_partition};
use fatc::tensor::Tensor;

proptest! {
    #[test]
    fn zigzag_round_trips(v in any::<i32>()) {
        prop_assert_eq!(unzigzag(zigzag(v as i64)), v as i64);
    }

    #[test]
    fn zigzag_is_order_preserving_in_magnitude(v in -1_000_000i64..1_000_000) {
        // |v| and the code grow together: code in {2|v|-1, 2|v|}.
        let code = zigzag(v);
        prop_assert!(code as i64 >= 2 * v.abs() - 1);
        prop_assert!(code as i64 <= 2 * v.abs());
    }

    #[test]
    fn range_coder_round_trips_mixed_payloads(
        syms in proptest::collection::vec(0usize..8, 0..200),
        raws in proptest::collection::vec((any::<u16>(), 1u32..17), 0..50),
    ) {
        let cdf: Vec<u32> = (0..=8).map(|i| i * (PROB_SCALE / 8)).collect();
        let mut enc = RangeEncoder::new();
        for &s in &syms {
            enc.encode_symbol(s, &cdf);
        }
        for &(v, n) in &raws {
            enc.encode_bits(v as u64 & ((1 << n) - 1), n);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &s in &syms {
            prop_assert_eq!(dec.decode_symbol(&cdf), s);
        }
        for &(v, n) in &raws {
            prop_assert_eq!(dec.decode_bits(n), v as u64 & ((1 << n) - 1));
        }
    }

    #[test]
    fn gaussian_coder_round_trips(
        items in proptest::collection::vec(
            (-200i64..200, -50.0f64..50.0, 0.05f64..64.0),
            1..300,
        )
    ) {
        let mut coder = GaussianCoder::new();
        let mut enc = RangeEncoder::new();
        for &(v, mu, sigma) in &items {
            coder.encode(&mut enc, v, mu, sigma).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &(v, mu, sigma) in &items {
            prop_assert_eq!(coder.decode(&mut dec, mu, sigma).unwrap(), v);
        }
    }

    #[test]
    fn bitstream_round_trips(
        hash in any::<[u8; 32]>(),
        lambda in any::<u8>(),
        h in 1u32..4096,
        w in 1u32..4096,
        ranges in proptest::collection::vec((-100i32..0, 0i32..100), 0..8),
        z in proptest::collection::vec(any::<u8>(), 0..64),
        segs in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..32), 0..7),
    ) {
        let b = Bitstream {
            config_hash: hash,
            lambda_index: lambda,
            height: h,
            width: w,
            z_ranges: ranges,
            z_bytes: z,
            y_segments: segs,
        };
        let bytes = b.to_bytes();
        prop_assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn window_partition_merge_inverse(
        c in 1usize..4,
        wh in 1usize..4,
        ww in 1usize..4,
        nh in 1usize..4,
        nw in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = fatc::testutil::test_rng(seed);
        let (h, w) = (wh * nh, ww * nw);
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(data, &[c, h, w]);
        let wins = window_partition(&x, wh, ww).unwrap();
        let back = window_merge(&wins, h, w).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }
}
