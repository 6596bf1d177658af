mod common;

use common::{random_attributed_graph, random_graph, random_tree, weak_components};
use modsift_core::features::{FeatureConfig, SignatureExtractor, StatisticalEmbedder};
use modsift_core::graph::{parse_program_graph, Partition};
use modsift_core::metrics::{weighted_directed_mq, MqNormalization};
use modsift_core::modularize::{modularize, modularize_traced, ModularizerConfig};
use modsift_core::parallel::Execution;
use modsift_core::volume::{propagate_volumes, PropagationConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn norm_strategy() -> impl Strategy<Value = MqNormalization> {
    prop_oneof![
        Just(MqNormalization::Literal),
        Just(MqNormalization::Standard)
    ]
}

proptest! {
    #[test]
    fn graph_documents_round_trip(seed in any::<u64>(), n in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_attributed_graph(&mut rng, n);
        let back = parse_program_graph(g.to_json().as_bytes()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_json(), g.to_json());
    }

    #[test]
    fn tree_root_collects_all_volume(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, root) = random_tree(&mut rng, n);
        let total: u64 = g.functions.iter().map(|f| f.volume).sum();
        let wg = propagate_volumes(&g, &PropagationConfig { c: 1.0 });
        prop_assert_eq!(wg.fv[root], total as f64);
    }

    #[test]
    fn trace_replays_exactly(
        seed in any::<u64>(),
        n in 2usize..80,
        p in 0.005f64..0.1,
        norm in norm_strategy(),
        biases in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, p);
        let wg = propagate_volumes(&g, &PropagationConfig::default());
        let mut config = if biases { ModularizerConfig::default() } else { ModularizerConfig::without_biases() };
        config.normalization = norm;
        let (partition, steps) = modularize_traced(&wg, &config);
        let mut labels: Vec<usize> = (0..n).collect();
        let mut q = weighted_directed_mq(&wg, &Partition::from_labels(labels.clone()), norm);
        let mut fresh = n;
        for s in &steps {
            let to = match s.joined {
                Some(f) => labels[f],
                None => { fresh += 1; fresh }
            };
            for &m in &s.moved {
                labels[m] = to;
            }
            let next = weighted_directed_mq(&wg, &Partition::from_labels(labels.clone()), norm);
            prop_assert!((next - q - s.delta_q_prime).abs() <= 1e-9);
            prop_assert!(s.delta_q > 0.0);
            q = next;
        }
        let mut replayed = Partition::from_labels(labels).modules();
        let mut produced = partition.modules();
        replayed.sort();
        produced.sort();
        prop_assert_eq!(replayed, produced);
        for module in partition.modules() {
            prop_assert_eq!(weak_components(&g, &module), 1);
        }
    }

    #[test]
    fn modularization_is_deterministic(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 0.05);
        let wg = propagate_volumes(&g, &PropagationConfig::default());
        let config = ModularizerConfig::default();
        prop_assert_eq!(modularize(&wg, &config), modularize(&wg, &config));
    }

    #[test]
    fn parallel_signing_matches_sequential(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_attributed_graph(&mut rng, n);
        let wg = propagate_volumes(&g, &PropagationConfig::default());
        let partition = modularize(&wg, &ModularizerConfig::default());
        let config = FeatureConfig::default();
        let ex = SignatureExtractor::new(&g, &partition, &config, &StatisticalEmbedder).unwrap();
        prop_assert_eq!(ex.extract_all(Execution::Parallel), ex.extract_all(Execution::Sequential));
    }
}
