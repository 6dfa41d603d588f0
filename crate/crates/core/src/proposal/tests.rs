use super::*;
use crate::captcha::{render_mean, sample_prior, Image, Latent, StyleSpec};
use crate::seed;
use crate::Error;

fn tiny_net(seed: u64) -> (StyleSpec, ProposalNet) {
    let style = StyleSpec::tiny();
    let net = ProposalNet::new(ArchConfig::tiny(&style), seed).unwrap();
    (style, net)
}

fn pairs(style: &StyleSpec, n: usize, seed: u64) -> Vec<(Latent, Image)> {
    let mut rng = seed::rng(seed, &[]);
    (0..n)
        .map(|_| {
            let x = sample_prior(style, &mut rng);
            let y = render_mean(&x, style).unwrap();
            (x, y)
        })
        .collect()
}

#[test]
fn embedding_shape_and_determinism() {
    let (style, net) = tiny_net(1);
    let y = render_mean(&sample_prior(&style, &mut seed::rng(2, &[])), &style).unwrap();
    let a = net.embed(&y).unwrap();
    assert_eq!(a.len(), net.arch().embedding_width());
    assert_eq!(a, net.embed(&y).unwrap());
}

#[test]
fn zero_image_gives_zero_embedding() {
    let (style, net) = tiny_net(1);
    let zero = Image::blank(style.canvas.height, style.canvas.width);
    assert!(net.embed(&zero).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_image_size_is_config_error() {
    let (_, net) = tiny_net(1);
    assert!(matches!(net.embed(&Image::blank(5, 5)), Err(Error::Config(_))));
}

#[test]
fn zero_heads_give_uniform_steps_and_schedule_is_enforced() {
    let (style, mut net) = tiny_net(4);
    net.zero_heads();
    let y = render_mean(&sample_prior(&style, &mut seed::rng(2, &[])), &style).unwrap();
    let embedding = net.embed(&y).unwrap();
    let mut state = net.initial_state();
    let input = |prev, head| StepInput { embedding: embedding.clone(), prev, head };
    assert!(matches!(net.step(&mut state.clone(), &input(None, 1)), Err(Error::Usage(_))));
    let p = net.step(&mut state, &input(None, 0)).unwrap();
    assert_eq!(p, vec![0.5, 0.5]);
    // L = 1 (class 0): K = 1, so two more steps, then the schedule ends
    assert!(matches!(net.step(&mut state.clone(), &input(None, 1)), Err(Error::Usage(_))));
    let p = net.step(&mut state, &input(Some(0), 1)).unwrap();
    assert_eq!(p.len(), 2);
    let p = net.step(&mut state, &input(Some(1), 2)).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(matches!(net.step(&mut state, &input(Some(0), 2)), Err(Error::Usage(_))));
    assert_eq!(state.steps(), 3);
}

#[test]
fn step_matches_teacher_forced_scoring() {
    let (style, net) = tiny_net(9);
    for (x, y) in pairs(&style, 5, 3) {
        let classes = latent_classes(&x, &style).unwrap();
        let embedding = net.embed(&y).unwrap();
        let mut state = net.initial_state();
        let mut lq = 0.0;
        let mut prev = None;
        for (t, &c) in classes.iter().enumerate() {
            let head = net.arch().heads.kind_at(t);
            let p = net.step(&mut state, &StepInput { embedding: embedding.clone(), prev, head }).unwrap();
            lq += p[c].ln();
            prev = Some(c);
        }
        assert!((lq - net.score(&style, &y, &x).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn step_count_follows_length() {
    let style = StyleSpec::desk_default();
    let x = Latent { length: 4, epsilons: vec![0, 0], letters: vec![1, 2, 3, 4] };
    assert_eq!(x.steps(), 7);
    assert_eq!(latent_classes(&x, &style).unwrap().len(), 7);
    let back = latent_from_classes(&latent_classes(&x, &style).unwrap(), &style);
    assert_eq!(back, x);
}

#[test]
fn loss_is_mean_negative_log_q() {
    let (style, net) = tiny_net(5);
    let batch = pairs(&style, 6, 8);
    let loss = net.loss(&style, &batch).unwrap();
    let mean: f64 = batch.iter().map(|(x, y)| -net.score(&style, y, x).unwrap()).sum::<f64>() / 6.0;
    assert!((loss - mean).abs() < 1e-9);
}

#[test]
fn out_of_domain_label_is_data_error() {
    let (style, net) = tiny_net(5);
    let mut batch = pairs(&style, 2, 8);
    batch[0].0.epsilons[0] = 7;
    assert!(matches!(net.loss(&style, &batch), Err(Error::Data(_))));
}

#[test]
fn samples_rescore_exactly() {
    let (style, net) = tiny_net(6);
    let y = pairs(&style, 1, 2).remove(0).1;
    let mut rng = seed::rng(1, &[]);
    for _ in 0..20 {
        let (x, lq) = net.sample_proposal(&style, &y, &mut rng).unwrap();
        x.check_prior(&style).unwrap();
        assert!((net.score(&style, &y, &x).unwrap() - lq).abs() < 1e-12);
    }
}

#[test]
fn decode_takes_argmax_path() {
    let (style, net) = tiny_net(7);
    let y = pairs(&style, 1, 4).remove(0).1;
    let x = net.decode_map(&style, &y).unwrap();
    let embedding = net.embed(&y).unwrap();
    let mut state = net.initial_state();
    let classes = latent_classes(&x, &style).unwrap();
    let mut prev = None;
    for (t, &c) in classes.iter().enumerate() {
        let head = net.arch().heads.kind_at(t);
        let p = net.step(&mut state, &StepInput { embedding: embedding.clone(), prev, head }).unwrap();
        let best = p.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(p.iter().position(|&v| v == best).unwrap(), c);
        prev = Some(c);
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let style = StyleSpec::tiny();
    let cfg = TrainConfig {
        steps: 60,
        batch: 16,
        adam: crate::autodiff::AdamConfig { lr: 0.01, ..Default::default() },
        log_every: 20,
        heldout: 10,
        seed: 3,
        wall_clock: false,
    };
    let run = || {
        let mut net = ProposalNet::new(ArchConfig::tiny(&style), 1).unwrap();
        let mut report = TrainReport::default();
        train(&mut net, &style, &cfg, BatchSource::Fresh, &mut report, |_| {}).unwrap();
        (net, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(a.params(), b.params());
    assert_eq!(ra.metrics.len(), 3);
    let head: f64 = ra.losses[..10].iter().sum();
    let tail: f64 = ra.losses[50..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}
