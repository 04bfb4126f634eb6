//! Which domain inputs a training step sees.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::Strategy;
use crate::numerics::Tensor;
use crate::synthdata::PairedSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "v")]
    Vocal,
    #[serde(rename = "m")]
    Mixture,
}

/// Inputs of `sample` used by `strategy`. Only `random` draws from `rng`,
/// exactly one coin per call.
pub fn select_inputs<'a>(
    strategy: &Strategy,
    sample: &'a PairedSample,
    rng: &mut ChaCha8Rng,
) -> Vec<(Domain, &'a Tensor)> {
    let vocal = (Domain::Vocal, &sample.vocal);
    let mixture = (Domain::Mixture, &sample.mixture);
    match strategy {
        Strategy::Voc => vec![vocal],
        Strategy::Mix => vec![mixture],
        Strategy::Random => {
            if rng.gen_bool(0.5) {
                vec![vocal]
            } else {
                vec![mixture]
            }
        }
        Strategy::Both | Strategy::Cns { .. } => vec![vocal, mixture],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Distance;
    use crate::synthdata::{generate_sample, GenConfig};
    use crate::{seeded_rng, RngStream};

    fn sample() -> PairedSample {
        generate_sample(5, &GenConfig::finetuning()).unwrap()
    }

    #[test]
    fn fixed_strategies() {
        let s = sample();
        let mut rng = seeded_rng(0, RngStream::DomainCoin);
        let domains = |st: Strategy, rng: &mut ChaCha8Rng| -> Vec<Domain> {
            select_inputs(&st, &s, rng).into_iter().map(|(d, _)| d).collect()
        };
        assert_eq!(domains(Strategy::Voc, &mut rng), vec![Domain::Vocal]);
        assert_eq!(domains(Strategy::Mix, &mut rng), vec![Domain::Mixture]);
        assert_eq!(domains(Strategy::Both, &mut rng), vec![Domain::Vocal, Domain::Mixture]);
        let cns = Strategy::Cns { kind: Distance::L2, weight: 1.0 };
        let picked = select_inputs(&cns, &s, &mut rng);
        assert!(std::ptr::eq(picked[0].1, &s.vocal));
        assert!(std::ptr::eq(picked[1].1, &s.mixture));
    }

    #[test]
    fn random_is_a_reproducible_fair_coin() {
        let s = sample();
        let draw = |seed| {
            let mut rng = seeded_rng(seed, RngStream::DomainCoin);
            (0..10_000)
                .map(|_| select_inputs(&Strategy::Random, &s, &mut rng)[0].0)
                .collect::<Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        let rate = a.iter().filter(|&&d| d == Domain::Vocal).count() as f64 / a.len() as f64;
        assert!((rate - 0.5).abs() <= 0.05, "{rate}");
    }

    #[test]
    fn only_random_consumes_the_coin_stream() {
        let s = sample();
        let mut used = seeded_rng(9, RngStream::DomainCoin);
        let fresh = seeded_rng(9, RngStream::DomainCoin);
        select_inputs(&Strategy::Both, &s, &mut used);
        select_inputs(&Strategy::Voc, &s, &mut used);
        assert_eq!(used.get_word_pos(), fresh.get_word_pos());
    }
}
