use gipip::flsim::SealedGroundTruth;
use gipip::tensor::Tensor;

fn peek(truth: &SealedGroundTruth) -> &Tensor {
    &truth.images
}

fn main() {}
