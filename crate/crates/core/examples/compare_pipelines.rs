//! Runs the four main pipelines from one base config, writes each run
//! directory and prints the comparison table.
//!
//! `cargo run --release --example compare_pipelines -- [out_dir] [seed]`

use std::path::PathBuf;

use dpcompress::harness::{
    compare_runs, format_table, pretrain_teacher, DataSource, PipelineConfig, PipelineKind,
    PreparedData,
};
use dpcompress::model::InitKind;

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs-compare".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let mut base = PipelineConfig::canonical(PipelineKind::Finetune, seed);
    base.model.hidden = 32;
    base.model.blocks = 6;
    if let DataSource::Synthetic { public_shift, clusters_per_class, data_seed, .. } = &mut base.data {
        *public_shift = 0.5;
        *clusters_per_class = 4;
        *data_seed = seed;
    }
    let data = PreparedData::from_config(&base.data).unwrap();
    let pretrained = pretrain_teacher(&base, &data).unwrap();

    let mut runs = Vec::new();
    let mut c = base.clone();
    c.name = "finetune-teacher".into();
    runs.push(c);
    for (name, init) in [("dpkd-random", InitKind::Random), ("dpkd-zeroshot", InitKind::ZeroshotPt)] {
        let mut c = base.clone();
        c.name = name.into();
        c.pipeline = PipelineKind::Dpkd;
        c.kd.init = init;
        runs.push(c);
    }
    let mut c = base.clone();
    c.name = "dpimp-unstructured".into();
    c.pipeline = PipelineKind::DpimpUnstructured;
    runs.push(c);

    let mut dirs = Vec::new();
    for c in &runs {
        let art = dpcompress::harness::run_with(c, &data, &pretrained).unwrap();
        dirs.push(art.write(&out).unwrap());
    }
    print!("{}", format_table(&compare_runs(&dirs).unwrap()));
}
