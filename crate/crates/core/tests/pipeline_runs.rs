use dacsm_core::losses::LossWeights;
use dacsm_core::pipeline::{evaluate, generate_domains, Experiment, TargetSet};

#[test]
fn thirty_epochs_beat_the_untrained_model() {
    let mut e = Experiment::default().with_seed(7);
    e.train.epochs = 30;
    let (_, out) = e.run().unwrap();
    let last = out.history.last().unwrap();
    println!(
        "target avg {:.3} -> {:.3}, a-distance {:.3} -> {:.3}",
        out.initial.eval.avg, last.eval.avg, out.initial.a_distance, last.a_distance
    );
    assert!(last.eval.avg > out.initial.eval.avg);
    assert!(last.a_distance < out.initial.a_distance);
}

#[test]
fn identical_domains_have_no_gap() {
    let mut e = Experiment::default().with_seed(7);
    e.data.target = e.data.source;
    e.train.epochs = 15;
    e.train.warmup_epochs = 14;
    e.train.noise_sigma = 0.0;
    e.train.weights = LossWeights {
        w_cls_s: 1.0,
        ..LossWeights::zero()
    };
    let (_, out) = e.run().unwrap();
    // fresh draws from both domains
    let mut held_out = e.data.clone();
    held_out.seed = 1007;
    held_out.source_per_class = 2000;
    held_out.target_per_class = 2000;
    let data = generate_domains(&held_out).unwrap();
    let source = TargetSet::new(data.source.images, data.source.labels).unwrap();
    let on_source = evaluate(&out.model, &source).unwrap().avg;
    let on_target = evaluate(&out.model, &data.target).unwrap().avg;
    println!("source {on_source:.3}, target {on_target:.3}");
    assert!(on_source > 0.5);
    assert!((on_source - on_target).abs() <= 0.02);
}
