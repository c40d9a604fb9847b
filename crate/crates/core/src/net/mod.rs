//! A small trainable classifier whose weights can be gated by a mask plan.

pub mod codec;
mod model;
mod spec;
mod train;

pub use model::{argmax, softmax, LayerParams, MaskedModel, NetError, Real, TrainingMeta};
pub use spec::{shape_len, GeomKind, LayerGeometry, LayerSpec, ModelSpec, Shape, SpecError};
pub use train::{
    accuracy, build_pruned_ensemble, train, Ensemble, EnsembleOptions, Rejection, TrainError,
    TrainHyper,
};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::Rng as _;

    use super::*;
    use crate::forge::Example;
    use crate::graph::{generate_regular_graph, RelationalGraph};
    use crate::mapping::plan_for_model;
    use crate::rng;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            input_shape: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 4,
                    kernel: 3,
                    padding: 1,
                    maskable: false,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense {
                    units: 6,
                    maskable: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    units: 3,
                    maskable: false,
                },
            ],
            class_count: 3,
        }
    }

    fn ring_plan(spec: &ModelSpec) -> Arc<crate::mapping::MaskPlan> {
        let g = RelationalGraph::cycle(4).unwrap();
        Arc::new(plan_for_model(spec, &g, "c4").unwrap())
    }

    fn random_input(len: usize, seed: u64) -> Vec<f32> {
        let mut r = rng::seeded(seed);
        (0..len).map(|_| r.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let mut m = MaskedModel::<f32>::new(small_spec(), 1).unwrap();
        for p in &mut m.params {
            p.weight.fill(0.0);
        }
        let out = m.forward(&random_input(16, 2)).unwrap();
        assert!(out.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-7));
        assert_eq!(m.predict_label(&random_input(16, 2)).unwrap(), 0);
        assert!(m
            .grad_input(&random_input(16, 3), 1)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn output_is_distribution() {
        let m = MaskedModel::<f32>::new(small_spec(), 4).unwrap();
        let p = m.forward(&random_input(16, 5)).unwrap();
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_tie_break_and_order() {
        assert_eq!(argmax(&[0.25f32, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1f32, 0.7, 0.2]), 1);
    }

    #[test]
    fn complete_mask_matches_unmasked() {
        let spec = small_spec();
        let m = MaskedModel::<f32>::new(spec.clone(), 7).unwrap();
        let full = Arc::new(plan_for_model(&spec, &RelationalGraph::complete(4).unwrap(), "k4").unwrap());
        let masked = m.pruned(full).unwrap();
        let x = random_input(16, 8);
        assert_eq!(m.forward(&x).unwrap(), masked.forward(&x).unwrap());
    }

    #[test]
    fn garbage_in_masked_slots_is_invisible() {
        let spec = small_spec();
        let clean = MaskedModel::<f32>::new(spec.clone(), 9)
            .unwrap()
            .pruned(ring_plan(&spec))
            .unwrap();
        let mut dirty = clean.clone();
        let mask = dirty.mask(3).unwrap().bits().to_vec();
        for (w, keep) in dirty.params[3].weight.iter_mut().zip(mask) {
            if !keep {
                *w = 1234.5;
            }
        }
        assert!(!dirty.masks_respected());
        for seed in 0..5 {
            let x = random_input(16, 100 + seed);
            assert_eq!(clean.forward(&x).unwrap(), dirty.forward(&x).unwrap());
            assert_eq!(clean.grad_input(&x, 1).unwrap(), dirty.grad_input(&x, 1).unwrap());
            assert_eq!(clean.predict_label(&x).unwrap(), dirty.predict_label(&x).unwrap());
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = MaskedModel::<f32>::new(small_spec(), 11)
            .unwrap()
            .cast::<f64>();
        let x: Vec<f64> = random_input(16, 12).into_iter().map(f64::from).collect();
        let g = m.grad_input(&x, 2).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.loss(&xp, 2).unwrap() - m.loss(&xm, 2).unwrap()) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-3);
            assert!((g[i] - fd).abs() <= 1e-4 * scale, "component {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let m = MaskedModel::<f32>::new(small_spec(), 1).unwrap();
        assert_eq!(
            m.forward(&[0.0; 3]).unwrap_err(),
            NetError::ShapeMismatch {
                expected: 16,
                got: 3
            }
        );
        let mut x = vec![0.5; 16];
        x[3] = f32::NAN;
        assert!(matches!(m.forward(&x), Err(NetError::NonFinite { .. })));
        let mut blown = m.clone();
        blown.params[0].weight.fill(f32::MAX);
        assert!(matches!(
            blown.forward(&[1.0; 16]),
            Err(NetError::NonFinite { .. })
        ));
        assert!(matches!(m.grad_input(&[0.5; 16], 3), Err(NetError::BadLabel { .. })));
    }

    fn blobs(n: usize, seed: u64) -> Vec<Example> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let centre = if label == 0 { 0.25 } else { 0.75 };
                Example {
                    x: (0..16).map(|_| centre + r.random_range(-0.15..0.15)).collect(),
                    label,
                }
            })
            .collect()
    }

    fn blob_spec() -> ModelSpec {
        let mut spec = small_spec();
        spec.class_count = 2;
        spec.layers[5] = LayerSpec::Dense {
            units: 2,
            maskable: false,
        };
        spec
    }

    #[test]
    fn learns_separable_blobs() {
        let data = blobs(200, 1);
        let m = MaskedModel::<f32>::new(blob_spec(), 3).unwrap();
        let hyper = TrainHyper {
            epochs: 20,
            seed: 5,
            ..TrainHyper::default()
        };
        let trained = train(m, &data, &data, &hyper).unwrap();
        assert!(trained.meta.train_accuracy >= 0.99, "{:?}", trained.meta);
        assert_eq!(trained.meta.epochs, 20);
    }

    #[test]
    fn zero_epochs_leave_weights() {
        let m = MaskedModel::<f32>::new(blob_spec(), 3).unwrap();
        let hyper = TrainHyper {
            epochs: 0,
            ..TrainHyper::default()
        };
        let out = train(m.clone(), &blobs(20, 1), &[], &hyper).unwrap();
        assert_eq!(out.params, m.params);
    }

    #[test]
    fn masked_training_keeps_zeros_and_is_deterministic() {
        let spec = blob_spec();
        let m = MaskedModel::<f32>::new(spec.clone(), 3)
            .unwrap()
            .pruned(ring_plan(&spec))
            .unwrap();
        let data = blobs(64, 2);
        let hyper = TrainHyper {
            epochs: 10,
            seed: 8,
            ..TrainHyper::default()
        };
        let a = train(m.clone(), &data, &data, &hyper).unwrap();
        let b = train(m, &data, &data, &hyper).unwrap();
        assert!(a.masks_respected());
        let mask = a.mask(3).unwrap();
        assert!(a.params[3]
            .weight
            .iter()
            .zip(mask.bits())
            .all(|(&w, &keep)| keep || w == 0.0));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_detected() {
        let m = MaskedModel::<f32>::new(blob_spec(), 3).unwrap();
        let hyper = TrainHyper {
            epochs: 5,
            learning_rate: 1e30,
            ..TrainHyper::default()
        };
        assert!(matches!(
            train(m, &blobs(64, 2), &[], &hyper),
            Err(TrainError::DivergenceDetected { .. })
        ));
    }

    #[test]
    fn default_arch_mac_ratio() {
        let spec = ModelSpec::desk_default([1, 8, 8], 4);
        let g = generate_regular_graph(64, 3, 3, 1_000_000).unwrap();
        let m = MaskedModel::<f32>::new(spec.clone(), 1).unwrap();
        let pruned = m.pruned(Arc::new(plan_for_model(&spec, &g, "g").unwrap())).unwrap();
        for (l, geom) in m.geometry().iter().enumerate() {
            if spec.layers[l].is_maskable() {
                let (kept, total) = crate::mapping::layer_macs(geom, pruned.mask(l));
                assert_eq!(kept as f64 / total as f64, 4.0 / 64.0);
            }
        }
        let (kept, total) = pruned.mac_counts();
        assert!(kept < total);
    }

    #[test]
    fn codec_round_trip() {
        let spec = small_spec();
        let plan = ring_plan(&spec);
        let m = MaskedModel::<f32>::new(spec, 21).unwrap().pruned(plan.clone()).unwrap();
        let bytes = codec::encode(&m).unwrap();
        assert_eq!(&bytes[..4], b"GGTM");
        assert_eq!(
            codec::plan_reference(&bytes).unwrap(),
            Some(plan.content_hash().unwrap())
        );
        let back = codec::decode(&bytes, Some(plan)).unwrap();
        assert_eq!(back.params, m.params);
        assert!(codec::decode(&bytes, None).is_err());
        assert!(codec::decode(&bytes[..bytes.len() - 5], None).is_err());

        let plain = MaskedModel::<f32>::new(small_spec(), 2).unwrap();
        let bytes = codec::encode(&plain).unwrap();
        assert_eq!(codec::plan_reference(&bytes).unwrap(), None);
        assert_eq!(codec::decode(&bytes, None).unwrap().params, plain.params);
    }

    #[test]
    fn ensemble_stops_at_target_and_honours_start() {
        let spec = blob_spec();
        let data = blobs(32, 4);
        let original = train(
            MaskedModel::<f32>::new(spec, 3).unwrap(),
            &data,
            &data,
            &TrainHyper {
                epochs: 5,
                ..TrainHyper::default()
            },
        )
        .unwrap();
        let graphs: Vec<(String, RelationalGraph)> = (0..5)
            .map(|i| (format!("c{i}"), RelationalGraph::cycle(4).unwrap()))
            .collect();
        let hyper = TrainHyper {
            epochs: 0,
            ..TrainHyper::default()
        };
        let options = EnsembleOptions {
            accept_ratio: 0.01,
            target_size: Some(2),
            ..EnsembleOptions::default()
        };
        let e = build_pruned_ensemble(&original, &graphs, &data, &data, &hyper, &options).unwrap();
        assert_eq!(e.graph_names, ["c0", "c1"]);
        let warm = original.pruned(e.models[0].plan().cloned().map(Arc::new).unwrap()).unwrap();
        assert_eq!(e.models[0].params, warm.params);

        let cold = EnsembleOptions {
            warm_start: false,
            target_size: None,
            ..options
        };
        let e = build_pruned_ensemble(&original, &graphs, &data, &data, &hyper, &cold).unwrap();
        assert_eq!(e.models.len(), 5);
        assert_ne!(e.models[0].params, warm.params);

        let strict = EnsembleOptions {
            accept_ratio: 1.0,
            min_size: 6,
            ..cold
        };
        assert!(matches!(
            build_pruned_ensemble(&original, &graphs, &data, &data, &hyper, &strict),
            Err(TrainError::EnsembleTooSmall { .. })
        ));
    }
}
