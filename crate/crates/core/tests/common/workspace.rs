//! A tiny synthetic corpus plus run config in a temporary directory.

use std::path::PathBuf;

use avlex::config::RunConfig;
use avlex::synth::{generate, write_corpus, SynthSpec};

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

impl Workspace {
    pub fn path(&self) -> &std::path::Path {
        self.dir.path()
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig::load(&self.config).unwrap()
    }

    /// A config next to the default one with the `key = value` lines of
    /// `overrides` replacing or extending it.
    pub fn variant(&self, name: &str, overrides: &str) -> PathBuf {
        let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
        let replaced: Vec<String> = overrides.lines().map(key).collect();
        let mut text = String::new();
        for line in std::fs::read_to_string(&self.config).unwrap().lines() {
            if !replaced.contains(&key(line)) {
                text.push_str(line);
                text.push('\n');
            }
        }
        text.push_str(overrides);
        text.push('\n');
        let path = self.path().join(format!("{name}.conf"));
        std::fs::write(&path, text).unwrap();
        path
    }
}

pub const RUN_CONFIG: &str = "data_dir = corpus
arch = 40:c8x1,c8x5,p3s2,c16x5;min=15
feature_dim = 64
batch_size = 16
lr = 0.01
epochs = 1
caption_frames = 300
k = 6
image_k = 2
sweep_k = 4, 6, 100000
sweep_thresholds = inf, 0.5
recall_k = 1, 5
";

/// 40 training and 12 held-out pairs over a 4-word vocabulary.
pub fn tiny() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        vocab: 4,
        words_max: 2,
        train_pairs: 40,
        test_pairs: 12,
        feature_dim: 64,
        image_width: 200,
        image_height: 150,
        seed: 9,
        out_dir: dir.path().join("corpus"),
        ..SynthSpec::default()
    };
    write_corpus(&generate(&spec).unwrap(), &spec.out_dir).unwrap();
    let config = dir.path().join("run.conf");
    std::fs::write(&config, format!("{RUN_CONFIG}work_dir = run\n")).unwrap();
    Workspace { dir, config }
}
