use fracpos::decoding::extend_cache;
use fracpos::posenc::abs_encoding;
use fracpos::training::{batch_loss, LossConfig, TrainExample};
use fracpos::vocab::{BOS, EOS};
use fracpos::*;
use substrate::{finite_diff_check, Checkpoint, GradCheckConfig};

fn tiny(scheme: PeScheme) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 12,
        max_len: 16,
        pe_scheme: scheme,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn hyp(tokens: &[u32], steps: &[usize]) -> Hypothesis {
    Hypothesis::from_parts(tokens.to_vec(), steps.to_vec())
}

#[test]
fn generation_order_mask_follows_steps() {
    let h = hyp(&[5, 6, 7], &[2, 1, 2]);
    let m = h.mask(MaskKind::GenerationOrder);
    let n = 5;
    let steps = [0, 2, 1, 2, 0];
    for q in 0..n {
        for k in 0..n {
            assert_eq!(m[q * n + k], steps[k] <= steps[q], "q={q} k={k}");
        }
    }
    assert!(h.mask(MaskKind::Full).iter().all(|&b| b));
}

/// Rows computed incrementally, in creation order, equal a full forward
/// under the generation-order mask.
#[test]
fn cached_rows_match_full_forward() {
    for scheme in [PeScheme::Rel, PeScheme::Fpe] {
        let model = Model::new(tiny(scheme)).unwrap();
        let src = [4u32, 9, 6, 11];
        let mem = model.encode(&src).unwrap();
        // Surface: 8 5 10 with creation steps 2 1 2.
        let h = hyp(&[8, 5, 10], &[2, 1, 2]);
        let mut fpe = model.fpe_state();
        if let Some(f) = fpe.as_mut() {
            let mid = f.insert(PosRef::Begin, PosRef::End, 1).unwrap();
            f.insert(PosRef::Begin, PosRef::Node(mid), 2).unwrap();
            f.insert(PosRef::Node(mid), PosRef::End, 2).unwrap();
        }
        // from_parts numbers creation by surface order; the position store
        // above numbers it 5, 8, 10. Map explicitly.
        let h = Hypothesis {
            created: vec![1, 0, 2],
            ..h
        };
        let full = model
            .decoder_forward(&h, fpe.as_ref(), &mem, &h.mask(MaskKind::GenerationOrder))
            .unwrap();

        let d = model.d_model();
        let pos = |r: PosRef| fpe.as_ref().map(|f| f.embedding(r).unwrap().to_vec());
        let meta = |step, surface| RowMeta { step, surface };
        let mut cache = DecoderCache::new(model.n_layers(), d);
        // BOS and EOS first, then step 1, then step 2.
        let plan: Vec<Vec<(u32, RowMeta, PosRef)>> = vec![
            vec![(BOS, meta(0, 0), PosRef::Begin), (EOS, meta(0, 4), PosRef::End)],
            vec![(5, meta(1, 2), PosRef::Node(0))],
            vec![(8, meta(2, 1), PosRef::Node(1)), (10, meta(2, 3), PosRef::Node(2))],
        ];
        let mut cached: Vec<RowMeta> = Vec::new();
        let mut surface_of_row = Vec::new();
        for group in &plan {
            let new: Vec<(u32, RowMeta)> = group.iter().map(|g| (g.0, g.1)).collect();
            let positions: Option<Vec<Vec<f64>>> = group.iter().map(|g| pos(g.2)).collect();
            extend_cache(&model, &mut cache, &cached, &new, positions.as_deref(), &mem).unwrap();
            cached.extend(new.iter().map(|n| n.1));
            surface_of_row.extend(group.iter().map(|g| g.1.surface));
        }
        for (row, &s) in surface_of_row.iter().enumerate() {
            for (a, b) in cache.hidden(row).iter().zip(full.row(s)) {
                assert!((a - b).abs() < 1e-10, "{scheme:?} row {row}");
            }
        }
    }
}

#[test]
fn abs_rejects_cache_extension() {
    let model = Model::new(tiny(PeScheme::Abs)).unwrap();
    let mem = model.encode(&[4, 5]).unwrap();
    let mut cache = DecoderCache::new(2, 8);
    let pe = vec![abs_encoding(0, 8).unwrap()];
    let r = extend_cache(&model, &mut cache, &[], &[(BOS, RowMeta { step: 0, surface: 0 })], Some(&pe), &mem);
    assert!(matches!(r, Err(Error::AbsIncremental)));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let model = Model::new(tiny(PeScheme::Fpe)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.checkpoint().save(&path).unwrap();
    let loaded = Model::from_checkpoint(model.config.clone(), &Checkpoint::load(&path).unwrap()).unwrap();
    let src = [4u32, 5, 6];
    let a = model.encode(&src).unwrap();
    let b = loaded.encode(&src).unwrap();
    assert_eq!(a.states.data(), b.states.data());

    let other = Model::new(tiny(PeScheme::Abs)).unwrap();
    assert!(Model::from_checkpoint(other.config.clone(), &model.checkpoint()).is_err());
}

#[test]
fn out_of_range_and_empty_inputs_are_errors() {
    let model = Model::new(tiny(PeScheme::Rel)).unwrap();
    assert!(matches!(model.encode(&[]), Err(Error::EmptySource)));
    assert!(matches!(model.encode(&[4, 12]), Err(Error::TokenOutOfRange { token: 12, .. })));
}

#[test]
fn config_is_toml_round_trippable() {
    let cfg = tiny(PeScheme::Rel);
    let text = toml::to_string(&cfg).unwrap();
    let back: ModelConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg, back);
    assert!(toml::from_str::<ModelConfig>("bogus_field = 1").is_err());
}

fn grad_examples() -> Vec<TrainExample> {
    vec![
        TrainExample::new(vec![4, 7, 5], vec![4, 7, 5, 9], vec![1]),
        TrainExample::new(vec![6, 8], vec![6, 8], vec![]),
        TrainExample::new(vec![10, 4, 11], vec![10, 4, 11], vec![0, 2]),
    ]
}

#[test]
fn gradients_of_small_models_match_finite_differences() {
    let cfg = GradCheckConfig {
        samples_per_param: 3,
        ..GradCheckConfig::default()
    };
    for scheme in [PeScheme::Abs, PeScheme::Rel, PeScheme::Fpe] {
        let model = Model::new(tiny(scheme)).unwrap();
        let mut store = model.params.clone();
        let ex = grad_examples();
        let loss = LossConfig::default();
        let report = finite_diff_check(&mut store, |g| batch_loss(&model, g, &ex, &loss).unwrap().0, &cfg);
        assert!(report.passed(), "{scheme:?}: {}", report.max_rel_err());
    }
    let l2r = Model::new(ModelConfig {
        head: HeadKind::L2r,
        ..tiny(PeScheme::Abs)
    })
    .unwrap();
    let mut store = l2r.params.clone();
    let ex = grad_examples();
    let report = finite_diff_check(&mut store, |g| batch_loss(&l2r, g, &ex, &LossConfig::default()).unwrap().0, &cfg);
    assert!(report.passed(), "l2r: {}", report.max_rel_err());
}

#[test]
fn packed_batch_rows_equal_single_rows() {
    let model = Model::new(tiny(PeScheme::Fpe)).unwrap();
    let a = [4u32, 5, 6, 7, 8];
    let b = [9u32, 10];
    let mut g = substrate::Graph::inference(&model.params);
    let both = model.encode_in(&mut g, &[&a, &b]).unwrap();
    let one = model.encode(&b).unwrap();
    assert_eq!(both.instance(1).data(), one.states.data());
}
