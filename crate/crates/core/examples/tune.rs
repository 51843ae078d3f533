// Temporary tuning harness; not part of the deliverable.
use driftbench_core::dataio::*;
use driftbench_core::divergence::*;
use driftbench_core::model::*;
use driftbench_core::trainer::*;
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(11);
    let frames: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(150);
    let hidden: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(32);
    let dropout: f64 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.5);

    let mut synth = SynthCfg::new(4, 8, 40, frames, seed);
    synth.noise_sigma = 0.25;
    let t0 = Instant::now();
    let src_trials = synth_gestures(&synth).unwrap();
    let stats = channel_stats(&src_trials).unwrap();
    let prep = PreprocessCfg::default_for_rate(1000.0);
    let src = build_dataset(&src_trials, &stats, &prep, 50, 25, "src").unwrap();
    println!(
        "setup: {} windows in {:.2}s",
        src.len(),
        t0.elapsed().as_secs_f64()
    );

    // stage I
    let mut clf = ClassifierParams::init(8, hidden, 2, hidden, 4, seed).unwrap();
    let mut cfg = TrainConfig::new(seed);
    cfg.dropout_p = dropout;
    let t1 = Instant::now();
    let report = train_source(&mut clf, &src, &cfg).unwrap();
    let intra = report.final_eval_accuracy;
    println!(
        "stage I: {} epochs in {:.1}s, val acc {:.2}%, best val loss {:.4}",
        report.epochs_run,
        t1.elapsed().as_secs_f64(),
        intra,
        report.best_eval_loss
    );
    let src_eval = evaluate(&clf, None, &src).unwrap();
    println!(
        "  source eval: acc {:.2}%, mu0 {:.4}",
        src_eval.accuracy, src_eval.losses.mean
    );

    // target domains: identical trials + shift
    for kind in [ShiftKind::Affine, ShiftKind::Nonlinear] {
        let spec = ShiftSpec::new(kind, seed.wrapping_add(1000));
        let tgt_trials = apply_shift(&src_trials, &spec).unwrap();
        let tgt = build_dataset(&tgt_trials, &stats, &prep, 50, 25, "tgt").unwrap();
        let pre = evaluate(&clf, None, &tgt).unwrap();
        println!(
            "{:?}: pre-DA acc {:.2}%, mu_target {:.4}",
            kind, pre.accuracy, pre.losses.mean
        );

        for adapter_kind in [AdapterKind::Linear, AdapterKind::Deep] {
            let mut ad = AdapterParams::identity(adapter_kind, 8);
            let mut acfg = cfg.clone();
            acfg.target_label_fraction = 0.2;
            acfg.learning_rate = std::env::var("ADAPT_LR")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0.001);
            acfg.max_epochs = std::env::var("ADAPT_EPOCHS")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(200);
            acfg.early_stop_patience = 20;
            let t2 = Instant::now();
            let rep = adapt_target(&mut clf, &mut ad, &tgt, &acfg).unwrap();
            let post = evaluate(&clf, Some(&ad), &tgt).unwrap();
            println!(
                "  {:?} adapter: {} epochs in {:.1}s, post acc {:.2}% (recovery {:.1}%), mu {:.4} (drop {:.1}%)",
                adapter_kind,
                rep.epochs_run,
                t2.elapsed().as_secs_f64(),
                post.accuracy,
                post.accuracy / intra * 100.0,
                post.losses.mean,
                (1.0 - post.losses.mean / pre.losses.mean) * 100.0
            );
        }
    }
}
