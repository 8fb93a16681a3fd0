use std::path::PathBuf;

use bam_core::agents::{Agent, Algorithm};
use bam_core::checkpoint::Checkpoint;
use bam_core::dataset::TeacherDataset;
use bam_core::domains::Environment;
use bam_core::harness::{teacher_demonstrations, ExperimentConfig, Protocol, Setup};
use bam_core::teacher::DemoMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn doorway_setup() -> Setup {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../environments/doorway.env");
    let cfg = ExperimentConfig::new(&path, vec![Algorithm::Bam], Protocol::DemosOnly, 1);
    Setup::new(Environment::load(&path).unwrap(), &cfg).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn bam_locates_the_doorway_from_one_round() {
    let setup = doorway_setup();
    let mut data = TeacherDataset::new(setup.env.num_tasks());
    teacher_demonstrations(&setup, 1, DemoMode::GreedyOptimal, &mut ChaCha8Rng::seed_from_u64(4), &mut data);
    let mut agent = Agent::new(Algorithm::Bam, &setup.ctx);
    agent.fit(&setup.ctx, &data).unwrap();
    let spec = &setup.env.spec;
    // Theta holds per-cell failure logits.
    let doorway = sigmoid(agent.theta[spec.cell_index(6, 4)]);
    let wall = sigmoid(agent.theta[spec.cell_index(5, 4)]);
    assert!(doorway < 0.5, "doorway failure {doorway}");
    assert!(wall > 0.5, "wall failure {wall}");

    let policies = agent.policies(&setup.ctx).unwrap();
    assert_eq!(policies.len(), 4);
}

#[test]
fn fitted_checkpoint_round_trips_exactly() {
    let setup = doorway_setup();
    let mut data = TeacherDataset::new(setup.env.num_tasks());
    teacher_demonstrations(&setup, 1, DemoMode::Boltzmann, &mut ChaCha8Rng::seed_from_u64(8), &mut data);
    let dir = tempfile::tempdir().unwrap();
    for algorithm in Algorithm::ALL {
        let mut agent = Agent::new(algorithm, &setup.ctx);
        agent.fit(&setup.ctx, &data).unwrap();
        let cp = Checkpoint::new(agent, "doorway", "hash");
        let path = dir.path().join(format!("{algorithm}.json"));
        cp.store(&path).unwrap();
        let back = Checkpoint::load(&path, Some(algorithm)).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_json(), cp.to_json());
        assert!(Checkpoint::load(&path, Some(if algorithm == Algorithm::Bam { Algorithm::Cloning } else { Algorithm::Bam })).is_err());
    }
    let path = dir.path().join("data.txt");
    data.store(&path).unwrap();
    assert_eq!(TeacherDataset::load(&path).unwrap(), data);
}
