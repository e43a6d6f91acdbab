use nakul::checkpoint;
use nakul::graph::{circle_positions, CIRCLE_RADIUS_M};
use nakul::model::*;
use nakul::tensor::rng::Streams;
use nakul::tensor::{flops, gradcheck};
use nakul::{ParamStore, Tape, Tensor, Var};

fn tiny() -> ModelConfig {
    ModelConfig {
        channels: 4,
        length: 200,
        rate: 250.0,
        classes: 3,
        patch: 25,
        d_model: 8,
        blocks: 2,
        heads: 2,
        top_k: 3,
        ffn_hidden: 16,
        head_hidden: 8,
        ..ModelConfig::default()
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (NakulModel, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = Streams::new(seed).stream("init");
    let m = NakulModel::new(cfg, &circle_positions(cfg.channels, CIRCLE_RADIUS_M), &mut store, &mut rng).unwrap();
    (m, store)
}

fn input(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
    let mut rng = Streams::new(seed).stream("x");
    Tensor::randn([b, cfg.channels, cfg.length], 1.0, &mut rng)
}

fn cross_entropy(tape: &Tape, logits: Var, labels: &[usize], classes: usize) -> Var {
    let mut onehot = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }
    let lp = tape.log_softmax(logits);
    let picked = tape.mul(lp, tape.constant(Tensor::new([labels.len(), classes], onehot).unwrap())).unwrap();
    tape.scale(tape.sum_all(picked).unwrap(), -1.0 / labels.len() as f64)
}

#[test]
fn patch_counts() {
    let mut cfg = ModelConfig::default();
    assert_eq!(cfg.patches(), 20);
    cfg.length = 1001;
    assert_eq!(cfg.patches(), 21);
    cfg.length = 49;
    assert!(cfg.validate().is_err());
}

#[test]
fn ragged_tail_is_zero_padded() {
    let cfg = ModelConfig { length: 201, ..tiny() };
    let (m, store) = build(&cfg, 1);
    let x = input(&cfg, 1, 2);
    let tape = Tape::with_params(&store);
    let e = tape.value(m.embed(&tape, tape.constant(x.clone())).unwrap());
    assert_eq!(e.shape(), &[1, 4, 9, 8]);
    let (w, b, pos) = (store.get(m.embed.w), store.get(m.embed.b), store.get(m.pos));
    for c in 0..4 {
        for dd in 0..8 {
            // the last window holds one real sample followed by 24 zeros
            let expect = x.get(&[0, c, 200]) * w.get(&[0, dd]) + b.data()[dd] + pos.get(&[c, 8, dd]);
            assert!((e.get(&[0, c, 8, dd]) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_input_and_offsets_embed_to_zero() {
    let cfg = tiny();
    let (m, mut store) = build(&cfg, 3);
    store.zero_prefix("embed.pos");
    store.zero_prefix("embed.b");
    let tape = Tape::with_params(&store);
    let e = tape.value(m.embed(&tape, tape.constant(Tensor::zeros([2, 4, 200]))).unwrap());
    assert!(e.data().iter().all(|v| *v == 0.0));
}

#[test]
fn zeroed_residual_branches_make_the_stack_an_identity() {
    let cfg = ModelConfig {
        blocks: 6,
        ..tiny()
    };
    let (m, mut store) = build(&cfg, 4);
    for p in m.residual_prefixes() {
        store.zero_prefix(&p);
    }
    let tape = Tape::with_params(&store);
    let out = m.forward(&tape, tape.constant(input(&cfg, 2, 5)), None).unwrap();
    let (e, f) = (tape.value(out.embedded), tape.value(out.features));
    assert!(f.max_abs_diff(&e) <= 1e-12);
}

#[test]
fn saturated_fusion_logits_match_forced_weights() {
    let cfg = tiny();
    let (m, mut store) = build(&cfg, 6);
    for b in &m.blocks {
        *store.get_mut(b.fusion_logits) = Tensor::from_vec(vec![40.0, -40.0, -40.0]);
    }
    let x = input(&cfg, 2, 7);
    let learned = m.predict(&store, &x).unwrap();
    let mut forced = m.clone();
    forced.cfg.fusion_weights = Some([1.0, 0.0, 0.0]);
    let fixed = forced.predict(&store, &x).unwrap();
    assert!(learned.max_abs_diff(&fixed) < 1e-6);
}

#[test]
fn shapes_and_simplex_weights() {
    let cfg = tiny();
    let (m, store) = build(&cfg, 8);
    let tape = Tape::with_params(&store);
    let out = m.forward(&tape, tape.constant(input(&cfg, 3, 9)), None).unwrap();
    assert_eq!(tape.value(out.logits).shape(), &[3, 3]);
    assert_eq!(tape.value(out.features).shape(), &[3, 4, 8, 8]);
    for t in &out.blocks {
        let w = tape.value(t.fusion_weights);
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for row in tape.value(t.kernel_weights).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(tape.value(t.band_gate).shape(), &[12, 4]);
    }
    let mut wrong = input(&cfg, 1, 10).into_data();
    wrong.truncate(3 * 200);
    let wrong = Tensor::new([1, 3, 200], wrong).unwrap();
    assert!(m.predict(&store, &wrong).is_err());
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let cfg = tiny();
    let (m, store) = build(&cfg, 11);
    let (m2, store2) = build(&cfg, 11);
    let x = input(&cfg, 2, 12);
    let a = m.predict(&store, &x).unwrap();
    let b = m.predict(&store, &x).unwrap();
    let c = m2.predict(&store2, &x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn training_noise_is_seeded() {
    let cfg = tiny();
    let (m, store) = build(&cfg, 13);
    let x = input(&cfg, 2, 14);
    let run = |seed: u64| {
        let mut rng = Streams::new(seed).stream("dropout");
        let tape = Tape::with_params(&store);
        let noise = TrainNoise {
            rng: &mut rng,
            dropout: 0.3,
            drop_edge: 0.5,
        };
        let out = m.forward(&tape, tape.constant(x.clone()), Some(noise)).unwrap();
        (*tape.value(out.logits)).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    assert_ne!(run(1), m.predict(&store, &x).unwrap());
}

#[test]
fn channel_perturbation_reaches_other_channels_only_through_the_graph() {
    let cfg = tiny();
    let (m, store) = build(&cfg, 15);
    let x = input(&cfg, 1, 16);
    let mut bumped = x.clone();
    for v in &mut bumped.data_mut()[200..400] {
        *v += 3.0;
    }
    let traces = |x: &Tensor| {
        let tape = Tape::with_params(&store);
        let out = m.forward(&tape, tape.constant(x.clone()), None).unwrap();
        let t = &out.blocks[0];
        [t.y_spec, t.y_dyn, t.y_graph].map(|v| (*tape.value(v)).clone())
    };
    let (a, b) = (traces(&x), traces(&bumped));
    let per_channel = 8 * 8;
    for c in [0usize, 2, 3] {
        let span = c * per_channel..(c + 1) * per_channel;
        assert_eq!(a[0].data()[span.clone()], b[0].data()[span.clone()]);
        assert_eq!(a[1].data()[span.clone()], b[1].data()[span.clone()]);
        assert_ne!(a[2].data()[span.clone()], b[2].data()[span]);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = tiny();
    let (m, store) = build(&cfg, 17);
    let x = input(&cfg, 2, 18);
    let ids: Vec<_> = store.ids().collect();
    let count = (store.num_scalars() / 100).max(60);
    let mut rng = Streams::new(19).stream("probe");
    let entries = gradcheck::sample_entries(&store, &ids, count, &mut rng);
    let report = gradcheck::check(&store, &entries, |tape| {
        let out = m.forward(tape, tape.constant(x.clone()), None)?;
        Ok(cross_entropy(tape, out.logits, &[0, 2], 3))
    })
    .unwrap();
    assert!(report.passed(1e-3), "worst: {:?}", report.worst());
}

#[test]
fn analytic_flops_track_instrumented_count() {
    for cfg in [tiny(), ModelConfig { length: 1000, top_k: 16, ..tiny() }] {
        let (m, store) = build(&cfg, 20);
        let x = input(&cfg, 2, 21);
        flops::reset();
        m.predict(&store, &x).unwrap();
        let measured = flops::read() as f64;
        let analytic = count_flops(&cfg, 2, None).total() as f64;
        let ratio = analytic / measured;
        assert!((0.5..=2.0).contains(&ratio), "analytic {analytic} measured {measured}");
    }
}

#[test]
fn flop_terms_scale_as_expected() {
    let cfg = ModelConfig::default();
    let a = count_flops(&cfg, 1, Some(256));
    let b = count_flops(&cfg, 1, Some(512));
    let fft_ratio = b.fft as f64 / a.fft as f64;
    assert!((fft_ratio - 2.0 * 9.0 / 8.0).abs() < 1e-12);
    assert_eq!(b.projection_ffn, 2 * a.projection_ffn);
    assert_eq!(b.attention, 2 * a.attention);
    assert_eq!(b.graph_conv, 2 * a.graph_conv);

    let none = count_flops(&ModelConfig { blocks: 0, ..cfg.clone() }, 1, None);
    assert_eq!(none.total(), none.embed + none.head);
    assert!(none.embed > 0 && none.head > 0);

    let totals: Vec<u64> = [128, 256, 512, 1024, 2048]
        .iter()
        .map(|&t| count_flops(&cfg, 1, Some(t)).total())
        .collect();
    assert!(totals.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn checkpoint_byte_layout() {
    let t = Tensor::new([2], vec![1.5, -2.0]).unwrap();
    let mut buf = Vec::new();
    checkpoint::write_tensors(&mut buf, &[("ab".to_string(), t)]).unwrap();
    let mut expect = b"NAKL".to_vec();
    expect.extend_from_slice(&1u32.to_le_bytes());
    expect.extend_from_slice(&1u32.to_le_bytes());
    expect.extend_from_slice(&2u16.to_le_bytes());
    expect.extend_from_slice(b"ab");
    expect.push(1);
    expect.extend_from_slice(&2u32.to_le_bytes());
    expect.extend_from_slice(&1.5f32.to_le_bytes());
    expect.extend_from_slice(&(-2.0f32).to_le_bytes());
    assert_eq!(buf, expect);
    let back = checkpoint::read_tensors(&mut &buf[..]).unwrap();
    assert_eq!(back[0].0, "ab");
    assert_eq!(back[0].1.data(), &[1.5, -2.0]);

    assert!(checkpoint::read_tensors(&mut &buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(checkpoint::read_tensors(&mut &bad[..]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig {
        fusion_weights: Some([0.5, 0.25, 0.25]),
        ..tiny()
    };
    let (m, store) = build(&cfg, 22);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.nakl");
    checkpoint::save(&path, &m, &store).unwrap();
    let (m2, store2) = checkpoint::load(&path).unwrap();
    assert_eq!(m2.cfg.channels, cfg.channels);
    assert_eq!(m2.cfg.kernel_sizes, cfg.kernel_sizes);
    assert_eq!(m2.cfg.fusion_weights, cfg.fusion_weights);
    assert_eq!(store2.len(), store.len());
    for id in store.ids() {
        let (a, b) = (store.get(id), store2.get(store2.find(store.name(id)).unwrap()));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, f64::from(*x as f32));
        }
    }
    // saving the loaded model again reproduces the file byte for byte
    let again = dir.path().join("again.nakl");
    checkpoint::save(&again, &m2, &store2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    let x = input(&cfg, 1, 23);
    assert!(m.predict(&store, &x).unwrap().max_abs_diff(&m2.predict(&store2, &x).unwrap()) < 1e-3);
}
