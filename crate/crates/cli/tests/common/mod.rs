#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adapter_forge_core::synth::{random_adapter, SynthDims};
use adapter_forge_core::{save_adapter, Adapter, ConfigSignature, NamingSchema};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LLAMA: &str = "meta-llama/Llama-2-7b-hf";
pub const DIMS: SynthDims = SynthDims { hidden: 8, ff: 12 };

pub struct Sandbox {
    pub dir: tempfile::TempDir,
}

impl Sandbox {
    pub fn new() -> Self {
        Sandbox {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs the binary inside the sandbox with no ambient configuration.
    pub fn run(&self, args: &[&str]) -> Output {
        self.command(args).output().unwrap()
    }

    pub fn command(&self, args: &[&str]) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_adapter-forge"));
        cmd.args(args)
            .current_dir(self.dir.path())
            .env_remove("ADAPTER_FORGE_SCHEMA")
            .env_remove("ADAPTER_FORGE_CONFIG")
            .env_remove("XDG_CONFIG_HOME")
            .env("HOME", self.dir.path());
        cmd
    }

    /// Writes a random adapter with the given signature and returns its directory.
    pub fn adapter(&self, name: &str, signature: &str, seed: u64, rank: usize) -> PathBuf {
        let adapter = make_adapter(signature, seed, rank, LLAMA);
        let dir = self.path(name);
        save_adapter(&adapter, &dir, &NamingSchema::default()).unwrap();
        dir
    }

    /// A Llama-2 population: QV 1271, QKVOFF 343, QKVO 141, FF 10.
    pub fn llama2_manifest(&self) -> PathBuf {
        let path = self.path("manifest.ndjson");
        let mut f = std::fs::File::create(&path).unwrap();
        let rows: [(&[&str], usize); 4] = [
            (&["q_proj", "v_proj"], 1271),
            (
                &["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"],
                343,
            ),
            (&["q_proj", "k_proj", "v_proj", "o_proj"], 141),
            (&["gate_proj", "up_proj", "down_proj"], 10),
        ];
        let mut id = 0;
        for (modules, count) in rows {
            for _ in 0..count {
                let record = serde_json::json!({
                    "adapter_id": format!("user/adapter-{id}"),
                    "peft_type": "LORA",
                    "target_modules": modules,
                    "base_model_id": LLAMA,
                });
                writeln!(f, "{record}").unwrap();
                id += 1;
            }
        }
        path
    }
}

pub fn make_adapter(signature: &str, seed: u64, rank: usize, base: &str) -> Adapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modules = signature.parse::<ConfigSignature>().unwrap().modules().unwrap();
    random_adapter(&mut rng, &modules, 2, DIMS, rank, 2.0 * rank as f64, base)
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(out)))
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
