//! Fixture consumption. Golden cases from the external reference generator
//! live under `tests/fixtures/reference/`; when none are checked in, a case
//! is synthesised here with an independent loop-based oracle so the loader
//! and comparison path still run.

use std::collections::BTreeMap;
use std::path::Path;

use adapter_forge_core::fixture::{
    delta_tensor_name, discover_fixtures, FixtureCase, FixtureDescriptor, FixtureDims, ReferenceInfo,
    DESCRIPTOR_FILE, EXPECTED_FILE,
};
use adapter_forge_core::merge::canonical_backdoors;
use adapter_forge_core::synth::{random_adapter, SynthDims};
use adapter_forge_core::tensor_io::TensorFile;
use adapter_forge_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn oracle_deltas(sources: &[Adapter], recipe: &Recipe, schema: &NamingSchema) -> BTreeMap<String, Vec<f32>> {
    let refs: Vec<&Adapter> = sources.iter().collect();
    let plan = plan_merge(refs[0], &refs[1..], recipe).unwrap();
    let mut out = BTreeMap::new();
    for (slot, contributions) in plan.assignments() {
        let first = sources[contributions[0].source].pair(slot.layer, slot.kind).unwrap();
        let (d_out, d_in) = (first.d_out(), first.d_in());
        let mut acc = vec![0.0f64; d_out * d_in];
        for c in contributions {
            let p = sources[c.source].pair(slot.layer, slot.kind).unwrap();
            let s = c.weight as f64 * p.alpha() / p.rank() as f64;
            for i in 0..d_out {
                for j in 0..d_in {
                    let mut dot = 0.0;
                    for k in 0..p.rank() {
                        dot += p.up()[[i, k]] as f64 * p.down()[[k, j]] as f64;
                    }
                    acc[i * d_in + j] += s * dot;
                }
            }
        }
        out.insert(
            delta_tensor_name(schema, slot.layer, slot.kind),
            acc.into_iter().map(|v| v as f32).collect(),
        );
    }
    out
}

fn write_fixture(dir: &Path, task_sig: &str, kind: RecipeKind, weights: &str, seed: u64, schema: &NamingSchema) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = SynthDims { hidden: 6, ff: 10 };
    let layers = 2;
    let task_mods = task_sig.parse::<ConfigSignature>().unwrap().modules().unwrap();
    let mut sources = vec![random_adapter(&mut rng, &task_mods, layers, dims, 4, 8.0, "base/llama")];
    for m in canonical_backdoors(&task_mods, kind) {
        sources.push(random_adapter(&mut rng, &m, layers, dims, 3, 6.0, "base/llama"));
    }
    let recipe = Recipe::new(kind, weights.parse().unwrap()).unwrap();

    let mut names = Vec::new();
    for (i, a) in sources.iter().enumerate() {
        let name = format!("source_{i}");
        save_adapter(a, dir.join(&name), schema).unwrap();
        names.push(name);
    }
    let deltas = oracle_deltas(&sources, &recipe, schema);
    let file = TensorFile::from_tensors(
        BTreeMap::new(),
        deltas.into_iter().map(|(name, values)| {
            let shape = shape_for(&name, dims);
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name, "F32".to_string(), shape, bytes)
        }),
    );
    std::fs::write(dir.join(EXPECTED_FILE), file.to_bytes()).unwrap();

    let descriptor = FixtureDescriptor {
        seed,
        dims: FixtureDims {
            layers,
            hidden: dims.hidden,
            ff: dims.ff,
            ranks: sources.iter().map(|a| a.tensors().values().next().unwrap().rank()).collect(),
        },
        recipe: kind,
        weights: recipe.weights.clone(),
        expected_signature: predict_signature(&task_mods, kind).unwrap(),
        tolerance: 1e-5,
        reference: ReferenceInfo {
            implementation: "loop-oracle".into(),
            version: "0".into(),
            version_mismatch: None,
        },
        sources: names,
    };
    std::fs::write(dir.join(DESCRIPTOR_FILE), serde_json::to_vec_pretty(&descriptor).unwrap()).unwrap();
}

fn shape_for(name: &str, dims: SynthDims) -> Vec<usize> {
    let kind = [
        ("q_proj", ModuleKind::Q),
        ("k_proj", ModuleKind::K),
        ("v_proj", ModuleKind::V),
        ("o_proj", ModuleKind::O),
        ("gate_proj", ModuleKind::FfGate),
        ("up_proj", ModuleKind::FfUp),
        ("down_proj", ModuleKind::FfDown),
    ]
    .into_iter()
    .find(|(n, _)| name.contains(n))
    .unwrap()
    .1;
    let (r, c) = dims.shape_of(kind);
    vec![r, c]
}

#[test]
fn synthesised_fixtures_pass() {
    let schema = NamingSchema::default();
    let root = tempfile::tempdir().unwrap();
    let cases = [
        ("QV", RecipeKind::ThreeWayComplement, "1:1:1.5"),
        ("QKVO", RecipeKind::FfOnly, "1:2"),
        ("QV", RecipeKind::FusionFull, "1:1"),
        ("QK", RecipeKind::TwoWayComplement, "1:1"),
        ("QKV", RecipeKind::Same, "1:2"),
        ("QV", RecipeKind::Safety, "0.6:0.4"),
    ];
    for (i, (task, kind, weights)) in cases.iter().enumerate() {
        let dir = root.path().join(format!("case_{i:02}"));
        std::fs::create_dir_all(&dir).unwrap();
        write_fixture(&dir, task, *kind, weights, 100 + i as u64, &schema);
    }
    let found = discover_fixtures(root.path()).unwrap();
    assert_eq!(found.len(), cases.len());
    for dir in found {
        let case = FixtureCase::load(&dir, &schema).unwrap();
        let outcome = case.check(&schema).unwrap();
        assert!(outcome.passed, "{}: {outcome:?}", dir.display());
        assert!(outcome.max_deviation <= 1e-5);
    }
}

#[test]
fn tampered_fixture_fails() {
    let schema = NamingSchema::default();
    let root = tempfile::tempdir().unwrap();
    write_fixture(root.path(), "QV", RecipeKind::FfOnly, "1:1", 7, &schema);
    let mut case = FixtureCase::load(root.path(), &schema).unwrap();
    let first = case.expected.values_mut().next().unwrap();
    first[[0, 0]] += 0.01;
    let outcome = case.check(&schema).unwrap();
    assert!(!outcome.passed);
    assert!(outcome.max_deviation >= 0.009);

    case.expected.pop_first();
    assert!(matches!(case.check(&schema), Err(Error::MalformedFixture(_))));
}

#[test]
fn malformed_descriptor_is_rejected() {
    let schema = NamingSchema::default();
    let root = tempfile::tempdir().unwrap();
    write_fixture(root.path(), "QV", RecipeKind::FfOnly, "1:1", 8, &schema);
    let path = root.path().join(DESCRIPTOR_FILE);
    let mut desc: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    desc["sources"] = serde_json::json!(["source_0"]);
    std::fs::write(&path, serde_json::to_vec(&desc).unwrap()).unwrap();
    assert!(matches!(FixtureCase::load(root.path(), &schema), Err(Error::MalformedFixture(_))));
    std::fs::write(&path, b"{not json").unwrap();
    assert!(matches!(FixtureCase::load(root.path(), &schema), Err(Error::MalformedFixture(_))));
}

#[test]
fn checked_in_reference_fixtures_pass() {
    let schema = NamingSchema::default();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference");
    for dir in discover_fixtures(&root).unwrap() {
        let case = FixtureCase::load(&dir, &schema).unwrap();
        if let Some(note) = &case.descriptor.reference.version_mismatch {
            eprintln!("{}: reference version mismatch: {note}", dir.display());
        }
        let outcome = case.check(&schema).unwrap();
        assert!(outcome.passed, "{}: {outcome:?}", dir.display());
    }
}
