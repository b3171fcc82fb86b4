//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use sentifuse::dataset::{Corpus, Dataset, Sample};
use sentifuse::encoders::{BackendDescriptor, BranchId, FeatureBundle, PresenceRule, Registry, StubBackend};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentifuse::featurestore::materialize_bundles;
use sentifuse::fusion::{FusionInput, Head};

pub fn sample(id: &str, label: usize) -> Sample {
    Sample {
        id: id.to_string(),
        text: format!("text of {id}"),
        text_norm: format!("text of {id}"),
        image_ref: format!("img/{id}.jpg"),
        label,
    }
}

/// `n` samples with labels cycling through the corpus classes.
pub fn balanced_dataset(n: usize, corpus: Corpus) -> Dataset {
    let c = corpus.num_classes();
    Dataset::new(corpus, (0..n).map(|i| sample(&format!("s{i:04}"), i % c)).collect()).unwrap()
}

/// Stub registry with every branch at `dim`; `planted` carries the label.
pub fn planted_registry(dim: usize, planted: BranchId, amplitude: f32) -> Registry {
    let mut registry = Registry::new();
    for b in BranchId::ALL {
        let d = BackendDescriptor::new(b, dim, "stub-1").unwrap();
        let rule = if b.can_be_absent() { PresenceRule::Fraction(0.6) } else { PresenceRule::Always };
        let mut backend = StubBackend::new(d, rule).unwrap();
        if b == planted {
            backend = backend.with_planted_signal(amplitude);
        }
        registry.insert(Box::new(backend));
    }
    registry
}

pub fn bundles(dataset: &Dataset, registry: &Registry) -> Vec<FeatureBundle> {
    materialize_bundles(None, &dataset.samples, registry, false).unwrap().bundles
}

pub fn loss(head: &Head<f64>, input: &FusionInput<f64>, label: usize, seed: u64) -> f64 {
    head.backward(input, label, Some(&mut ChaCha8Rng::seed_from_u64(seed))).unwrap().loss
}

/// Largest relative error between analytic and central-difference gradients.
pub fn gradient_error(head: &Head<f64>, input: &FusionInput<f64>, label: usize, seed: u64) -> f64 {
    let eps = 1e-5;
    let grads = head.backward(input, label, Some(&mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = head.clone();
    for (ti, t) in grads.params.iter().enumerate() {
        for i in 0..t.data.len() {
            let orig = probe.params()[ti].data[i];
            probe.params_mut()[ti].data[i] = orig + eps;
            let up = loss(&probe, input, label, seed);
            probe.params_mut()[ti].data[i] = orig - eps;
            let down = loss(&probe, input, label, seed);
            probe.params_mut()[ti].data[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = t.data[i];
            worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-6));
        }
    }
    worst
}
