use gipip::attack::AttackResult;
use gipip::flsim::SealedGroundTruth;

fn forge(truth: &SealedGroundTruth, x: gipip::tensor::Tensor) {
    let fake = AttackResult { recovered: x, trace: Vec::new(), best_restart: 0 };
    let _ = truth.reveal(&fake);
}

fn main() {}
