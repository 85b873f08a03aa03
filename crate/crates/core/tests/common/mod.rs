#![allow(dead_code)]

use graspalign::se3::{Mat3, Rotation3, Transform3, Vec3};
use graspalign::synth::{generate, Generated, NoiseSpec, ObjectSpec, Scenario, ScenarioSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn small_spec(seed: u64, n_train: usize, noise: NoiseSpec) -> ScenarioSpec {
    ScenarioSpec {
        seed,
        n_points: 2000,
        n_train,
        n_test: 2,
        noise,
        object: ObjectSpec::block(0.08, 0.05, 0.03),
        ..Default::default()
    }
}

pub fn scenario(spec: &ScenarioSpec) -> (Scenario, Generated) {
    let scn = Scenario::build(spec).expect("scenario");
    let gen = generate(&scn).expect("generate");
    (scn, gen)
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3 {
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-3 {
        Vec3::x()
    } else {
        axis.normalize()
    };
    Rotation3::from_axis_angle(&axis, rng.random_range(0.0..3.1))
}

pub fn random_transform(rng: &mut ChaCha8Rng, trans: f64) -> Transform3 {
    let t = Vec3::new(
        rng.random_range(-trans..trans),
        rng.random_range(-trans..trans),
        rng.random_range(-trans..trans),
    );
    Transform3::new(random_rotation(rng), t)
}

pub fn perturb(t: &Transform3, rot: f64, trans: f64, rng: &mut ChaCha8Rng) -> Transform3 {
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        1.0,
    )
    .normalize();
    let d = Transform3::new(
        Rotation3::from_axis_angle(&axis, rot),
        Vec3::new(
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
        ),
    );
    t.compose(&d)
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}

pub fn mat_entries(m: &Mat3) -> Vec<f64> {
    m.iter().copied().collect()
}
