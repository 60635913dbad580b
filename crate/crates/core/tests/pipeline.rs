use std::path::PathBuf;

use uniinit::data::{encode_idx_images, encode_idx_labels, load_mnist, Dataset, Split, TaskSpec};
use uniinit::experiments::{
    diagnose_ds, pretrain, run_benchmark, BenchmarkSpec, Candidate, DiagnosticConfig, FinetuneConfig, InitScheme,
    PretrainConfig,
};
use uniinit::losses::LossConfig;
use uniinit::mlp::{decode_checkpoint, encode_checkpoint, Architecture, ParamSet};
use uniinit::stochastics::{SeededRng, Stream};

fn write_fixture(dir: &std::path::Path) {
    for (prefix, n, salt) in [("train", 400usize, 0usize), ("t10k", 120, 5)] {
        let labels: Vec<u8> = (0..n).map(|i| ((i * 3 + salt) % 10) as u8).collect();
        let pixels: Vec<u8> = labels
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| {
                (0..9).map(move |j| {
                    if j == l as usize % 9 {
                        230
                    } else {
                        ((i * 13 + j * 7) % 50) as u8
                    }
                })
            })
            .collect();
        std::fs::write(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            encode_idx_images(n, 3, 3, &pixels),
        )
        .unwrap();
        std::fs::write(
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
            encode_idx_labels(&labels),
        )
        .unwrap();
    }
}

#[test]
fn pretrain_checkpoint_benchmark_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let (train, test): (Dataset<f32>, Dataset<f32>) = load_mnist(dir.path()).unwrap();
    assert_eq!((train.len(), test.len(), train.dim()), (400, 120, 9));
    assert_eq!(train.split, Split::Train);

    let arch = Architecture::classifier(&[9, 12, 12, 2]).unwrap();
    let init: ParamSet<f32> = InitScheme::Xavier.sample(&arch, &mut SeededRng::for_purpose(1, Stream::Init));
    let config = PretrainConfig {
        epochs: 1,
        window: 5,
        loss: LossConfig {
            n_perturb: 8,
            n_uniform: 16,
            ..LossConfig::default()
        },
        seed: 1,
        ..PretrainConfig::default()
    };
    let out = pretrain(&train.images, init, &config).unwrap();
    assert_eq!(out.steps, 13);
    assert_eq!(out.windows.len(), 3);

    let restored: ParamSet<f32> = decode_checkpoint(&encode_checkpoint(&out.params)).unwrap();
    assert_eq!(restored, out.params);

    let ds = diagnose_ds(
        &restored,
        &train.images,
        &DiagnosticConfig {
            batches: 4,
            n_perturb: 16,
            ..DiagnosticConfig::default()
        },
    )
    .unwrap();
    assert!((0.0..=100.0).contains(&ds.mean));

    let candidates = vec![
        Candidate {
            init: InitScheme::Xavier,
            pretrain: "ours".into(),
            pretrained: Some(restored),
        },
        Candidate {
            init: InitScheme::Xavier,
            pretrain: "none".into(),
            pretrained: None,
        },
    ];
    let spec = BenchmarkSpec {
        dims: vec![9, 12, 12, 2],
        ns: vec![5, 10],
        seeds: vec![3],
        tasks: 2,
        fixed_tasks: Some(vec![TaskSpec::new(0b1111100000).unwrap(), TaskSpec::new(1).unwrap()]),
        finetune: FinetuneConfig {
            epochs: 3,
            ..FinetuneConfig::default()
        },
    };
    let report = run_benchmark(&candidates, &spec, &train, &test).unwrap();
    assert_eq!(report.rows.len(), 2 * 2 * 2);
    assert_eq!(report.summary.len(), 4);
    assert!(report.rows.iter().all(|r| r.task_mask == 992 || r.task_mask == 1));
}

#[test]
fn canonical_mnist_when_present() {
    let dir = std::env::var_os("UNIINIT_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    if !dir.join("t10k-labels-idx1-ubyte").exists() {
        eprintln!("skipping: no MNIST in {}", dir.display());
        return;
    }
    let (train, test): (Dataset<f32>, Dataset<f32>) = load_mnist(&dir).unwrap();
    assert_eq!((train.len(), test.len(), train.dim()), (60_000, 10_000, 784));
    let mut counts = [0usize; 10];
    for &l in &test.labels {
        counts[l as usize] += 1;
    }
    assert_eq!(counts, [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);
    let col0: f64 = (0..train.len()).map(|i| train.images.get(i, 400) as f64).sum::<f64>() / train.len() as f64;
    assert!(col0.abs() < 1e-4);
}
