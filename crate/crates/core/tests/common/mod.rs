#![allow(dead_code)]

use std::path::Path;

use mvp_core::backend::{BackendSpec, MockScript};
use mvp_core::orchestrator::{MemberConfig, RunConfig, RunMode, SyntheticConfig};

pub const TERMS: &str = "B\tBabesiosis\tbabesia infection\n\
GCA\tGiant Cell Arteritis\ttemporal arteritis\n\
GVHD\tGraft Versus Host Disease\tgraft-versus-host disease\n\
COP\tCryptogenic Organizing Pneumonia\n";

pub const CLASSES: [&str; 4] = ["B", "GCA", "GVHD", "COP"];

pub fn member(id: &str, template: &str, script: MockScript) -> MemberConfig {
    MemberConfig {
        template: template.into(),
        spec: BackendSpec::mock(id, script),
    }
}

/// Four mocks in the paper's roster order; the fourth uses a second llama2-style template.
pub fn roster(scripts: [MockScript; 4]) -> Vec<MemberConfig> {
    let [a, b, c, d] = scripts;
    vec![
        member("llama2", "llama2", a),
        member("medalpaca", "alpaca", b),
        member("platypus2", "alpaca", c),
        member("vicuna", "vicuna", d),
    ]
}

/// A synthetic-corpus config rooted at `dir` (terms file written there).
pub fn synthetic_config(dir: &Path, run_id: &str, documents: usize, sizes: &[usize], backends: Vec<MemberConfig>) -> RunConfig {
    std::fs::write(dir.join("terms.tsv"), TERMS).unwrap();
    RunConfig {
        run_id: run_id.into(),
        seed: 20240,
        output_dir: "runs".into(),
        corpus: None,
        synthetic: Some(SyntheticConfig {
            documents,
            positive_rate: 0.5,
        }),
        gold: None,
        terms: "terms.tsv".into(),
        classes: CLASSES.iter().map(|s| s.to_string()).collect(),
        abbreviations: Default::default(),
        context_sizes: sizes.to_vec(),
        max_documents_per_class: None,
        filter: mvp_core::corpus::FilterConfig::new(4, 1.0).unwrap(),
        mode: RunMode::Mvp,
        prompt_mode: mvp_core::prompt::PromptMode::Cot,
        identification_threshold: None,
        parallelism: 4,
        templates: Default::default(),
        backends,
        base_dir: Some(dir.to_path_buf()),
    }
}
