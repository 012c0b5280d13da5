use std::path::Path;

use conns::config::RunConfig;
use conns::dataset::{decode_dataset, encode_dataset, Dataset, StepSample};
use conns::network::{decode_model, encode_model, Architecture, Model, ModelMeta, NetworkParams};
use conns::projection::ProjectionMode;
use conns::Error;
use nalgebra::DVector;
use proptest::prelude::*;
use serde_json::Value;

fn dataset(n: usize, values: Vec<f64>, ids: Vec<u32>) -> Dataset {
    let samples = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let chunk = |k: usize| DVector::from_fn(n, |j, _| values[(3 * n * i + k * n + j) % values.len()]);
            StepSample { x: chunk(0), k2_in: chunk(1), k2_out: chunk(2), trajectory_id: id, time_index: i as u32 }
        })
        .collect();
    Dataset { samples, system_name: "hopf".into(), n, dt: 0.01, newton_tol: 1e-9, trajectory_count: 64, seed: 9 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips_bit_exactly(
        n in 1usize..5,
        values in prop::collection::vec(-1e6..1e6f64, 1..40),
        ids in prop::collection::vec(0u32..64, 1..20),
    ) {
        let ds = dataset(n, values, ids);
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_dataset_is_rejected(pos in 0usize..10_000, bit in 0u8..8) {
        let ds = dataset(2, vec![0.5, -1.25, 3.0], vec![1, 2, 3]);
        let mut bytes = encode_dataset(&ds).unwrap();
        let pos = pos % bytes.len();
        bytes[pos] ^= 1 << bit;
        prop_assert!(decode_dataset(&bytes).is_err());
    }

    #[test]
    fn truncated_model_is_a_format_error(seed in 0u64..100, cut in 1usize..2000) {
        let arch = Architecture { width: 5, hidden_layers: 2, final_linear: true };
        let model = Model {
            params: NetworkParams::init(2, arch, seed),
            meta: ModelMeta {
                system: "cubic_oscillator".into(),
                dt: 0.01,
                projection_mode: ProjectionMode::Spectral,
                eps_proj: 1e-3,
                normalization: None,
            },
        };
        let bytes = encode_model(&model).unwrap();
        prop_assert_eq!(decode_model(&bytes).unwrap(), model);
        let cut = cut.min(bytes.len() - 1);
        let is_format_error = matches!(decode_model(&bytes[..bytes.len() - cut]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}

fn shipped() -> (Value, std::path::PathBuf) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let text = std::fs::read_to_string(dir.join("cubic_oscillator.json")).unwrap();
    (serde_json::from_str(&text).unwrap(), dir)
}

fn set(v: &mut Value, path: &str, value: Value) {
    let mut cur = v;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = &mut cur[*part];
    }
    cur[parts[parts.len() - 1]] = value;
}

#[test]
fn every_mutated_field_is_rejected_with_its_path() {
    use serde_json::json;
    let cases = [
        ("integration.dt", json!(0.0), "integration.dt"),
        ("integration.dt", json!(0.2), "integration.dt"),
        ("integration.t_end", json!(-1.0), "integration.t_end"),
        ("integration.tol", json!(0.0), "integration.tol"),
        ("integration.max_iter", json!(0), "integration.max_iter"),
        ("data.n_train", json!(0), "data.n_train"),
        ("data.n_test", json!(0), "data.n_test"),
        ("train.arch.width", json!(0), "train.arch"),
        ("train.arch.hidden_layers", json!(0), "train.arch"),
        ("train.constrained.eps_proj", json!(0.9), "train.constrained"),
        ("train.constrained.projection_mode", json!("none"), "train.constrained.projection_mode"),
        ("train.unconstrained.projection_mode", json!("spectral"), "train.unconstrained.projection_mode"),
        ("train.unconstrained.lr", json!(-1.0), "train.unconstrained"),
        ("fixed_point.constrained.tol", json!(0.0), "fixed_point.constrained"),
        ("system.sampler.scale", json!([0.1]), "system.sampler"),
        ("system.sampler.scale", json!([0.1, -0.1]), "system.sampler"),
        ("system.name", json!("lorenz"), "system"),
    ];
    let (base, dir) = shipped();
    RunConfig::from_json(&base.to_string(), &dir).unwrap();
    for (path, value, expected) in cases {
        let mut v = base.clone();
        set(&mut v, path, value.clone());
        let err = RunConfig::from_json(&v.to_string(), &dir).expect_err(path);
        let msg = err.to_string();
        assert!(msg.contains(expected), "{path} = {value}: message '{msg}' lacks '{expected}'");
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let (mut v, dir) = shipped();
    set(&mut v, "data.n_tran", serde_json::json!(3));
    assert!(RunConfig::from_json(&v.to_string(), &dir).is_err());
}
