//! Throwaway diagnostic, run with: cargo test --release --test scratch -- --nocapture --ignored

use scentree_cli::experiments::{quantizer_pair, random_instance, ExperimentConfig};
use scentree_core::models::ProcessModel;
use scentree_core::nested::{upper_bound_lipschitz, SupEstimation};
use scentree_core::quantize::objective_estimate;
use scentree_core::rng::{mix, stream_rng};

#[test]
#[ignore]
fn dissect_pathological_cell() {
    let seed = 13u64;
    let cfg = ExperimentConfig {
        fb_iterations: 30000,
        fb_step: "square-summable".into(),
        quantizer_order: 1,
        sup_histories: 32,
        sup_scalar_atoms: 128,
        sup_joint_samples: 256,
        ..ExperimentConfig::default()
    };
    let tag = 0x5Cu64;
    for idx in 0..50usize {
        let stream = |purpose: u64| mix(tag << 56 | (idx as u64) << 8, purpose);
        let mut inst_rng = stream_rng(seed, stream(0));
        let (core, branching) = random_instance(&cfg, 30.0, &mut inst_rng).unwrap();
        if !(core.dim() == 1 && core.stages() == 3 && branching[0] == 5) {
            continue;
        }
        println!("rep {idx}: D=1 T=3 b=5");
        println!("mean {:?}", core.mean().as_slice());
        println!("cov {}", core.covariance());
        let quant_seed = stream_rng(seed, stream(1)).random::<u64>();
        let sup_seed = stream_rng(seed, stream(2)).random::<u64>();
        let model = ProcessModel::Gaussian(core);
        let (kw, fb) = quantizer_pair(&cfg, &model, &branching, quant_seed).unwrap();
        let sup = SupEstimation {
            extra_histories: 32,
            scalar_atoms: 128,
            joint_samples: 256,
            seed: sup_seed,
        };
        let kw_bound = upper_bound_lipschitz(&model, &kw, 1, &sup).unwrap();
        let fb_bound = upper_bound_lipschitz(&model, &fb, 1, &sup).unwrap();
        println!("kw value {}  terms {:?}", kw_bound.value, kw_bound.stage_terms);
        println!("fb value {}  terms {:?}", fb_bound.value, fb_bound.stage_terms);
        println!("amplifiers {:?}", kw_bound.amplifiers);
        for (label, tree) in [("kw", &kw), ("fb", &fb)] {
            let obj = objective_estimate(tree, &model, 20000, 1, 99).unwrap();
            println!("{label} own-objective {obj}");
            let probs = tree.node_probabilities();
            let s1: Vec<(Vec<f64>, f64)> = tree
                .nodes_at_stage(1)
                .map(|id| (tree.node(id).value.clone(), probs[id]))
                .collect();
            println!("{label} stage-1 nodes {s1:?}");
        }
        return;
    }
    panic!("cell not found");
}

use rand::Rng;
