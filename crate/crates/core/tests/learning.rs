use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsic_core::agent::EncodedState;
use tsic_core::qnet::{Head, QNetwork, ReplayMemory, StateDims, TrainConfig, Transition, Weights};

fn dims() -> StateDims {
    StateDims {
        node_block: 3 * 6,
        task_block: 6,
        request_block: 9,
        num_nodes: 3,
        num_images: 3,
    }
}

fn state<R: Rng>(rng: &mut R) -> EncodedState {
    let d = dims();
    EncodedState {
        nodes: (0..d.node_block).map(|_| rng.gen()).collect(),
        task: (0..d.task_block).map(|_| rng.gen()).collect(),
        requests: (0..d.request_block).map(|_| rng.gen()).collect(),
    }
}

#[test]
fn overfits_a_fixed_terminal_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 8,
        hidden: 32,
        ..TrainConfig::default()
    };
    let mut net = QNetwork::new(dims(), cfg, &mut rng);
    let mut ds = ReplayMemory::new(8);
    let mut dc = ReplayMemory::new(8);
    for i in 0..8 {
        let s = state(&mut rng);
        ds.push(Transition {
            state: s.clone(),
            action: i % 3,
            reward: -(i as f64) * 0.5,
            next: None,
        });
        dc.push(Transition {
            state: s,
            action: i,
            reward: (i % 4) as f64,
            next: None,
        });
    }
    let first = net.train_step(&ds, &dc, &mut rng).unwrap();
    let mut last = first;
    for _ in 0..3000 {
        last = net.train_step(&ds, &dc, &mut rng).unwrap();
    }
    let (s0, c0) = (first.scheduling_loss.unwrap(), first.caching_loss.unwrap());
    let (s1, c1) = (last.scheduling_loss.unwrap(), last.caching_loss.unwrap());
    assert!(s1 < s0 * 0.01, "scheduling loss {s0} -> {s1}");
    assert!(c1 < c0 * 0.01, "caching loss {c0} -> {c1}");
    for i in 0..8 {
        let t = ds.get(i).unwrap();
        let q = net.forward(&t.state, Head::Scheduling, Weights::Policy).unwrap();
        assert!((q[t.action] - t.reward).abs() < 0.1);
    }
}

#[test]
fn target_tracks_policy_only_on_sync() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = TrainConfig {
        batch_size: 4,
        hidden: 8,
        ..TrainConfig::default()
    };
    let mut net = QNetwork::new(dims(), cfg, &mut rng);
    let mut ds = ReplayMemory::new(16);
    for i in 0..4 {
        ds.push(Transition {
            state: state(&mut rng),
            action: i % 3,
            reward: 5.0,
            next: Some(state(&mut rng)),
        });
    }
    let probe = state(&mut rng);
    let before = net.forward(&probe, Head::Scheduling, Weights::Target).unwrap();
    for _ in 0..20 {
        net.train_step(&ds, &ReplayMemory::new(4), &mut rng).unwrap();
    }
    assert_eq!(net.forward(&probe, Head::Scheduling, Weights::Target).unwrap(), before);
    assert_ne!(net.forward(&probe, Head::Scheduling, Weights::Policy).unwrap(), before);
    net.sync_target();
    assert_eq!(
        net.forward(&probe, Head::Scheduling, Weights::Target).unwrap(),
        net.forward(&probe, Head::Scheduling, Weights::Policy).unwrap()
    );
    assert_eq!(net.steps(), 20);
}
