use camforge_core::model::{cam_mask, BlockConfig, CamConfig, CamModule, DenseTdnnLayer, ParamBuilder};
use camforge_core::ops::{global_avg_pool, segment_avg_pool, BnMode, Segments};
use camforge_core::{Error, Model, ParamStore, Preset, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layer_with_cam(store: &mut ParamStore) -> DenseTdnnLayer {
    let block = BlockConfig { num_layers: 1, growth_rate: 6, bottleneck_channels: 8, kernel: 3, dilation: 1 };
    let cam = CamConfig { reduction: 2, segment_pooling: true };
    DenseTdnnLayer::new(&mut ParamBuilder::new(store, 4), "l", 10, &block, Some(&cam), 7).unwrap()
}

fn parts(store: &ParamStore, layer: &DenseTdnnLayer, s: &Tensor) -> (Tensor, Tensor) {
    let mut t = Tape::inference(store);
    let sv = t.input(s.clone());
    let (_, f, r) = layer.forward_parts(&mut t, sv, BnMode::Infer).unwrap();
    (t.value(f).clone(), t.value(r).clone())
}

#[test]
fn saturated_masks_pass_or_block_the_local_output() {
    let mut store = ParamStore::new();
    let layer = layer_with_cam(&mut store);
    let b2 = layer.cam.as_ref().unwrap().b2;
    let s = Tensor::rand_uniform([10, 30], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));

    let (f, r) = parts(&store, &layer, &s);
    for (a, b) in f.data().iter().zip(r.data()) {
        assert!(b.abs() <= a.abs());
    }

    store.param_mut(b2).value = Tensor::full([6], 30.0);
    let (f, r) = parts(&store, &layer, &s);
    assert!(f.max_abs_diff(&r) < 1e-6);

    store.param_mut(b2).value = Tensor::full([6], -30.0);
    let (_, r) = parts(&store, &layer, &s);
    assert!(r.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn zero_parameters_give_a_half_mask() {
    let mut store = ParamStore::new();
    let cam = CamModule::new(&mut ParamBuilder::new(&mut store, 0), "cam", 4, 2, 3, 5, true).unwrap();
    for p in store.params_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let segs = Segments::new(11, 5).unwrap();
    let eg = Tensor::rand_uniform([4], -2.0, 2.0, &mut rng);
    let es = Tensor::rand_uniform([4, 3], -2.0, 2.0, &mut rng);
    let m = cam_mask(&store, &cam, &eg, Some(&es), &segs).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.5));
}

#[test]
fn length_weighted_segment_means_give_the_global_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (frames, len) in [(250, 100), (100, 100), (37, 10), (101, 25)] {
        let x = Tensor::rand_uniform([5, frames], -1.0, 1.0, &mut rng);
        let pooled = segment_avg_pool(&x, len).unwrap();
        let global = global_avg_pool(&x).unwrap();
        let k = pooled.segments.count();
        for c in 0..5 {
            let weighted: f64 = pooled
                .segments
                .ranges()
                .enumerate()
                .map(|(j, r)| pooled.embeddings.data()[c * k + j] as f64 * r.len() as f64)
                .sum();
            assert!((weighted / frames as f64 - global.data()[c] as f64).abs() < 1e-5);
        }
        if frames == len {
            assert_eq!(pooled.embeddings.data(), global.data());
        }
    }
    assert_eq!(Segments::new(250, 100).unwrap().bounds(), &[0, 100, 200, 250]);
}

#[test]
fn unknown_tensor_is_reported_by_name() {
    let model = Model::from_preset(Preset::Tiny, 1).unwrap();
    let mut tensors: Vec<(String, Tensor)> =
        model.store().named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
    tensors.push(("xvector.extra.weight".into(), Tensor::zeros([2])));
    let mut fresh = Model::from_preset(Preset::Tiny, 0).unwrap();
    match fresh.set_tensors(tensors) {
        Err(Error::UnknownTensor(n)) => assert_eq!(n, "xvector.extra.weight"),
        other => panic!("{other:?}"),
    }
}
