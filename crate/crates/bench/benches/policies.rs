use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsic_core::agent::{run_episode, state_dims, AgentConfig, Greedy};
use tsic_core::cache::{CachePolicy, LfuMemory};
use tsic_core::model::{Image, NodeSpec, NodeState, Point};
use tsic_core::qnet::{Head, QNetwork, ReplayMemory, Transition, Weights};
use tsic_core::sim::{generate_workload, SimConfig, Simulator};
use tsic_core::{EncodedState, TrainConfig, TsicAgent};

fn random_state<R: Rng>(rng: &mut R, nodes: usize, task: usize, requests: usize) -> EncodedState {
    EncodedState {
        nodes: (0..nodes).map(|_| rng.gen()).collect(),
        task: (0..task).map(|_| rng.gen()).collect(),
        requests: (0..requests).map(|_| rng.gen()).collect(),
    }
}

fn qnet(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = state_dims(5, 6, 6);
    let net = QNetwork::new(dims, TrainConfig::default(), &mut rng);
    let s = random_state(&mut rng, dims.node_block, dims.task_block, dims.request_block);
    c.bench_function("qnet/forward_caching", |b| {
        b.iter(|| net.forward(black_box(&s), Head::Caching, Weights::Policy).unwrap())
    });

    let mut ds = ReplayMemory::new(1000);
    let mut dc = ReplayMemory::new(1000);
    for i in 0..200 {
        let t = |action| Transition {
            state: random_state(
                &mut ChaCha8Rng::seed_from_u64(i),
                dims.node_block,
                dims.task_block,
                dims.request_block,
            ),
            action,
            reward: -1.0,
            next: Some(random_state(
                &mut ChaCha8Rng::seed_from_u64(i + 1000),
                dims.node_block,
                dims.task_block,
                dims.request_block,
            )),
        };
        ds.push(t(i as usize % 5));
        dc.push(t(i as usize % 30));
    }
    c.bench_function("qnet/train_step_batch32", |b| {
        b.iter_batched(
            || net.clone(),
            |mut n| n.train_step(&ds, &dc, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn lfu(c: &mut Criterion) {
    let images: Vec<Image> = (0..20)
        .map(|id| Image {
            id,
            size_mb: 253.07 + 10.0 * id as f64,
        })
        .collect();
    let spec = NodeSpec {
        location: Point::new(0.5, 0.5),
        cpu: 4.0,
        mem_mb: 1024.0,
        storage_mb: 3500.0,
        bandwidth: 20.0,
        cloud_bandwidth: 20.0,
    };
    for policy in [CachePolicy::Adaptive, CachePolicy::FixedSize(6)] {
        c.bench_function(&format!("cache/ensure_capacity_{}", policy.label()), |b| {
            b.iter_batched(
                || (NodeState::new(0, spec, 20), LfuMemory::new(policy, 1)),
                |(mut node, mut lfu)| {
                    for k in 0..100 {
                        let m = (k * 7) % 20;
                        lfu.ensure_capacity(&mut node, &images, &images[m]).unwrap();
                        lfu.touch(0, m).unwrap();
                    }
                },
                BatchSize::SmallInput,
            )
        });
    }
}

fn episodes(c: &mut Criterion) {
    let cfg = SimConfig {
        rng_seed: 3,
        ..SimConfig::default()
    };
    let tasks = generate_workload(&cfg).unwrap();
    let mut group = c.benchmark_group("episode_200_tasks");
    group.sample_size(10);
    group.bench_function("greedy", |b| {
        b.iter(|| {
            let mut sim = Simulator::new(cfg.clone(), CachePolicy::Adaptive).unwrap();
            run_episode(&mut sim, &tasks, &mut Greedy).unwrap()
        })
    });
    group.bench_function("tsic_training", |b| {
        b.iter(|| {
            let mut sim = Simulator::new(cfg.clone(), CachePolicy::Adaptive).unwrap();
            let mut agent = TsicAgent::for_simulator(
                &sim,
                AgentConfig::default(),
                TrainConfig::default(),
                ChaCha8Rng::seed_from_u64(4),
            );
            run_episode(&mut sim, &tasks, &mut agent).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, qnet, lfu, episodes);
criterion_main!(benches);
