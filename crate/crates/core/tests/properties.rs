use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2ip::backbone::{random_input, Backbone, BackboneConfig};
use s2ip::metrics::{mase, mse_mae, naive2_forecast, owa, smape};
use s2ip::model::{ForecastModel, ModelConfig, PreparedWindow};
use s2ip::preprocess::{decompose, patch, revin_denormalize, revin_normalize, DecompositionMethod, PatchSpec};
use s2ip::prompt::{alignment_term, prefix_concat, retrieve_topk, retrieve_topk_with, AnchorBank, EmbeddingMatrix, Pooling};
use s2ip::series::{chronological_split, few_shot_truncate, windows, SeriesFrame, SplitSpec, WindowSpec};
use s2ip::tensor::{Tape, Tensor};

fn frame_from(values: &[f64], channels: usize) -> SeriesFrame {
    let rows = values.len() / channels;
    let cols: Vec<Vec<f64>> = (0..channels)
        .map(|c| (0..rows).map(|r| values[r * channels + c]).collect())
        .collect();
    SeriesFrame::from_columns(&cols, None).unwrap()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_parts_reassemble_the_frame(
        values in prop::collection::vec(-10.0f64..10.0, 20..400),
        val in 0.0f64..0.4,
        test in 0.0f64..0.4,
    ) {
        let frame = frame_from(&values, 2);
        let spec = SplitSpec { train: 1.0 - val - test, val, test, few_shot: None };
        let s = chronological_split(&frame, &spec).unwrap();
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), frame.len());
        let mut rebuilt = Vec::new();
        for part in [&s.train, &s.val, &s.test] {
            for r in 0..part.len() {
                rebuilt.extend_from_slice(part.row(r));
            }
        }
        prop_assert_eq!(rebuilt, values[..frame.len() * 2].to_vec());
    }

    #[test]
    fn few_shot_is_a_prefix(values in prop::collection::vec(-10.0f64..10.0, 20..300), f in 0.05f64..1.0) {
        let frame = frame_from(&values, 1);
        let cut = few_shot_truncate(&frame, f).unwrap();
        prop_assert_eq!(cut.len(), (f * frame.len() as f64).floor() as usize);
        prop_assert_eq!(cut.channel(0), frame.channel(0)[..cut.len()].to_vec());
    }

    #[test]
    fn windows_are_contiguous_and_counted(
        t in 10usize..200, lookback in 1usize..40, horizon in 1usize..20, stride in 1usize..7, channels in 1usize..3,
    ) {
        let values: Vec<f64> = (0..t * channels).map(|i| i as f64).collect();
        let frame = frame_from(&values, channels);
        let spec = WindowSpec { lookback, horizon, stride };
        let ws = windows(&frame, &spec);
        let per_channel = if lookback + horizon > t { 0 } else { (t - lookback - horizon) / stride + 1 };
        prop_assert_eq!(ws.len(), per_channel * channels);
        for w in &ws {
            let col = frame.channel(w.channel);
            prop_assert_eq!(&w.input[..], &col[w.offset..w.offset + lookback]);
            prop_assert_eq!(&w.target[..], &col[w.offset + lookback..w.offset + lookback + horizon]);
        }
    }

    #[test]
    fn revin_round_trip(
        x in prop::collection::vec(-1e3f64..1e3, 8..512),
        gamma in 0.1f64..5.0,
        beta in -3.0f64..3.0,
    ) {
        let (z, state) = revin_normalize(&x, gamma, beta, 1e-5).unwrap();
        let back = revin_denormalize(&z, &state).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!(state.variance >= 0.0);
    }

    #[test]
    fn decomposition_is_additive(
        x in prop::collection::vec(-10.0f64..10.0, 16..160),
        p in 0.0f64..1.0,
        w in 0.0f64..1.0,
        stl in any::<bool>(),
    ) {
        let n = x.len();
        let period = 2 + (p * (n / 2 - 2) as f64) as usize;
        let trend_window = 2 * ((w * ((n - 1) / 2) as f64) as usize) + 1;
        let method = if stl { DecompositionMethod::Stl } else { DecompositionMethod::Classical };
        let d = decompose(&x, period, trend_window, method).unwrap();
        for i in 0..n {
            prop_assert!((d.trend[i] + d.seasonal[i] + d.residual[i] - x[i]).abs() <= 1e-9);
        }
        if !stl {
            for start in (0..=n - period).step_by(period) {
                let s: f64 = d.seasonal[start..start + period].iter().sum();
                prop_assert!(s.abs() <= 1e-6, "period sum {}", s);
            }
        }
    }

    #[test]
    fn patches_are_verbatim_padded_slices(
        x in prop::collection::vec(-10.0f64..10.0, 1..200),
        l in 1usize..24,
        s_frac in 0.0f64..1.0,
    ) {
        prop_assume!(l <= x.len());
        let stride = 1 + (s_frac * (l - 1) as f64) as usize;
        let spec = PatchSpec { patch_length: l, stride };
        let p = patch(&x, &spec).unwrap();
        prop_assert_eq!(p.rows(), (x.len() - l) / stride + 2);
        prop_assert_eq!(p.rows(), spec.n_patches(x.len()));
        let mut padded = x.clone();
        padded.extend(std::iter::repeat_n(*x.last().unwrap(), stride));
        for r in 0..p.rows() {
            prop_assert_eq!(p.row(r), &padded[r * stride..r * stride + l]);
        }
    }

    #[test]
    fn backbone_preserves_shape(len in 1usize..12, batch in 1usize..3, seed in 0u64..50) {
        let cfg = BackboneConfig { embed_dim: 8, n_layers: 1, n_heads: 2, max_seq_len: 12, ..BackboneConfig::default() };
        let backbone = Backbone::init(cfg, seed, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_input(batch, len, 8, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let out = backbone.forward(&mut tape, v, None).unwrap();
        prop_assert_eq!(tape.shape(out), &[batch, len, 8][..]);
    }

    #[test]
    fn selection_is_scale_invariant_and_well_formed(
        ts in matrix(6, 5),
        anchors in matrix(12, 5),
        k in 1usize..12,
        c in 1e-3f64..1e3,
        per_patch in any::<bool>(),
    ) {
        let pooling = if per_patch { Pooling::PerPatch } else { Pooling::Mean };
        let a = retrieve_topk_with(&ts, &anchors, k, pooling).unwrap();
        let scaled = Tensor::matrix(6, 5, ts.data().iter().map(|v| v * c).collect()).unwrap();
        let b = retrieve_topk_with(&scaled, &anchors, k, pooling).unwrap();
        prop_assert_eq!(&a.indices, &b.indices);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!(a.scores.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(a.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        let mut idx = a.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), k);
    }

    #[test]
    fn prefix_rows_are_verbatim(sel in matrix(3, 4), ts in matrix(5, 4)) {
        let out = prefix_concat(&sel, &ts).unwrap();
        for r in 0..3 {
            prop_assert_eq!(out.row(r), sel.row(r));
        }
        for r in 0..5 {
            prop_assert_eq!(out.row(3 + r), ts.row(r));
        }
    }

    #[test]
    fn alignment_is_bounded(ts in matrix(4, 6), seed in 0u64..100, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EmbeddingMatrix::gaussian_mixture(40, 6, 4, 0.3, &mut rng).unwrap();
        let bank = AnchorBank::one_hot(&e, 8, &mut rng).unwrap();
        let sel = retrieve_topk(&ts, &bank, k).unwrap();
        let a = alignment_term(&ts, &sel, &bank);
        prop_assert!(a.abs() <= k as f64 + 1e-12);
    }

    #[test]
    fn smape_is_symmetric(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
        let (y, yhat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert_eq!(smape(&y, &yhat).unwrap(), smape(&yhat, &y).unwrap());
        prop_assert_eq!(smape(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn mse_mae_are_translation_invariant(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40),
        c in -100.0f64..100.0,
    ) {
        let (y, yhat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (m0, a0) = mse_mae(&y, &yhat).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
        let hs: Vec<f64> = yhat.iter().map(|v| v + c).collect();
        let (m1, a1) = mse_mae(&ys, &hs).unwrap();
        prop_assert!((m0 - m1).abs() <= 1e-9 * (1.0 + m0));
        prop_assert!((a0 - a1).abs() <= 1e-9 * (1.0 + a0));
        prop_assert_eq!(mse_mae(&y, &y).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn owa_of_naive2_against_itself_is_one(
        insample in prop::collection::vec(1.0f64..20.0, 30..80),
        actual in prop::collection::vec(1.0f64..20.0, 1..12),
        s in 1usize..7,
    ) {
        let f = naive2_forecast(&insample, s, actual.len()).unwrap();
        let sm = smape(&actual, &f).unwrap();
        let ms = mase(&actual, &f, &insample, s).unwrap();
        prop_assume!(sm > 0.0);
        if let Some(ms) = ms.filter(|m| *m > 0.0) {
            prop_assert_eq!(owa(sm, ms, sm, ms), Some(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn retrieval_is_invariant_to_affine_input(a in 0.1f64..50.0, b in -100.0f64..100.0, phase in 0.0f64..6.0) {
        // ε does not scale with the input variance, so keep it negligible
        let cfg = ModelConfig { revin_eps: 1e-14, ..ModelConfig::tiny() };
        let model = ForecastModel::new(cfg, 3).unwrap();
        let x: Vec<f64> = (0..32).map(|t| (t as f64 * 0.7 + phase).sin() + 0.03 * t as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (ex, _) = model.tokenize_and_embed(0, &x).unwrap();
        let (ey, _) = model.tokenize_and_embed(0, &y).unwrap();
        for (p, q) in ex.data().iter().zip(ey.data()) {
            prop_assert!((p - q).abs() <= 1e-6);
        }
        let sx = retrieve_topk(&ex, model.anchor_bank(), 2).unwrap();
        let sy = retrieve_topk(&ey, model.anchor_bank(), 2).unwrap();
        prop_assert_eq!(sx.indices, sy.indices);
    }

    #[test]
    fn zero_lambda_loss_is_plain_mse(seed in 0u64..1000) {
        let cfg = ModelConfig { lambda: 0.0, ..ModelConfig::tiny() };
        let model = ForecastModel::new(cfg, seed).unwrap();
        let windows: Vec<PreparedWindow> = (0..3)
            .map(|i| {
                let x: Vec<f64> = (0..32).map(|t| ((t + i) as f64 * 0.5).cos()).collect();
                let y: Vec<f64> = (0..8).map(|t| ((t + 32 + i) as f64 * 0.5).cos()).collect();
                model.prepare(0, &x, &y).unwrap()
            })
            .collect();
        let refs: Vec<&PreparedWindow> = windows.iter().collect();
        let mut tape = Tape::new();
        let parts = model.joint_loss(&mut tape, &refs, None).unwrap();
        let forecasts = model.forecast_batch(&refs).unwrap();
        let mut se = 0.0;
        for (w, f) in windows.iter().zip(&forecasts) {
            se += mse_mae(&w.target, f).unwrap().0;
        }
        prop_assert!((tape.scalar_value(parts.loss) - se / 3.0).abs() <= 1e-12);
    }
}
