use gipip::flsim::SealedGroundTruth;

fn main() {
    let _ = SealedGroundTruth { images: gipip::tensor::Tensor::scalar(0.0), labels: vec![] };
}
